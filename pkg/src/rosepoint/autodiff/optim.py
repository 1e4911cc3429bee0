"""Adam with a staircase exponential learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    learning_rate: float
    batch_size: int
    decay_step: int
    decay_rate: float
    weight_decay: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    samples_seen: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.decay_step < 1:
            raise ValueError("batch_size and decay_step must be >= 1")

    def effective_rate(self, samples_seen: int | None = None) -> float:
        seen = self.samples_seen if samples_seen is None else samples_seen
        return self.learning_rate * self.decay_rate ** (seen // self.decay_step)

    def hyperparameters(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "decay_step": self.decay_step,
            "decay_rate": self.decay_rate,
            "weight_decay": self.weight_decay,
        }

    def fresh(self) -> "OptimizerState":
        """Same hyperparameters, zeroed moments and counters."""
        return OptimizerState(**self.hyperparameters(), beta1=self.beta1, beta2=self.beta2, eps=self.eps)


def adam_step(params: dict, grads: dict, state: OptimizerState, n_samples: int = 0) -> None:
    """Update ``params`` (name -> ndarray, in place) from ``grads`` (name -> ndarray).

    Names absent from ``grads`` are left untouched, which is how frozen
    parameters are kept bit-identical.  ``n_samples`` advances the schedule
    after the update.
    """
    state.step += 1
    lr = state.effective_rate()
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.samples_seen += n_samples
