"""Finite-difference gradient checks shared by the unit and acceptance suites."""
import numpy as np

from oracles import numerical_grad, rel_err
from rosepoint import autodiff as ad
from rosepoint.networks import build_model, default_spec, geometry, network
from rosepoint.networks.layers import Ctx


def _project(out, w):
    return ad.reduce_sum(ad.mul(out, w))


def primitive_cases(rng):
    """(name, fn, inputs): fn maps input Tensors to an output Tensor."""
    A = lambda *s: rng.normal(size=s)
    idx = rng.integers(0, 5, (4, 6))
    lab = rng.integers(0, 3, 4)
    rm, rv = rng.normal(size=5), rng.uniform(0.5, 2, 5)
    return [
        ("add", lambda a, b: ad.add(a, b), [A(4, 5), A(1, 5)]),
        ("sub", lambda a, b: ad.sub(a, b), [A(4, 5), A(4, 1)]),
        ("mul", lambda a, b: ad.mul(a, b), [A(4, 5), A(4, 5)]),
        ("matmul", lambda a, b: ad.matmul(a, b), [A(4, 5), A(5, 3)]),
        ("matmul_batched", lambda a, b: ad.matmul(a, b), [A(2, 4, 5), A(5, 3)]),
        ("linear", lambda x, w, b: ad.linear(x, w, b), [A(4, 5), A(5, 3), A(3)]),
        ("reshape", lambda x: ad.reshape(x, (5, 4)), [A(4, 5)]),
        ("broadcast_to", lambda x: ad.broadcast_to(x, (3, 4, 5)), [A(4, 1)]),
        ("transpose", lambda x: ad.transpose(x, (1, 0)), [A(4, 5)]),
        ("concat", lambda a, b: ad.concat([a, b], axis=-1), [A(4, 5), A(4, 2)]),
        ("gather", lambda x: ad.gather(x, idx), [A(4, 5, 2)]),
        ("reduce_max", lambda x: ad.reduce_max(x, axis=1), [A(4, 5)]),
        ("reduce_sum", lambda x: ad.reduce_sum(x, axis=0), [A(4, 5)]),
        ("reduce_mean", lambda x: ad.reduce_mean(x, axis=1, keepdims=True), [A(4, 5)]),
        ("relu", lambda x: ad.relu(x), [A(4, 5)]),
        ("softmax", lambda x: ad.softmax(x), [A(4, 5)]),
        ("log_softmax", lambda x: ad.log_softmax(x), [A(4, 5)]),
        ("softmax_cross_entropy", lambda x: ad.softmax_cross_entropy(x, lab), [A(4, 3)]),
        ("batch_norm_train", lambda x, g, b: ad.batch_norm(x, g, b), [A(4, 5), A(5), A(5)]),
        ("batch_norm_eval", lambda x, g, b: ad.batch_norm(x, g, b, rm, rv, training=False),
         [A(4, 5), A(5), A(5)]),
    ]


def check_primitive(fn, inputs, rng, h=1e-5) -> float:
    """Max relative error of every input gradient of a random projection of fn."""
    tensors = [ad.Tensor(x.copy(), requires_grad=True) for x in inputs]
    with ad.Tape() as tape:
        out = fn(*tensors)
        w = rng.normal(size=out.shape)
        tape.backward(_project(out, w))
    worst = 0.0
    for t in tensors:
        def f():
            return _project(fn(*[ad.Tensor(s.data) for s in tensors]), w).item()
        num = numerical_grad(f, t.data, h)
        worst = max(worst, float(rel_err(t.grad, num).max()))
    return worst


def check_architecture(arch, rng, per_param=4, seed=3) -> float:
    """Max relative error over sampled parameter entries of a toy-width model.

    The dynamic neighbour graph is pinned after the first evaluation so the
    loss is a smooth function of the weights; the best of two step sizes is
    taken per entry.
    """
    spec = default_spec(arch, "toy")
    ck = build_model(spec, seed)
    pos = rng.uniform(-5, 5, (2, spec.n_points, 3))
    lab = rng.integers(0, 3, (2, spec.n_points))
    geom = geometry(spec, pos)
    g0 = {}
    network(Ctx(ck.params, ck.buffers, training=True, update_stats=False), spec, pos, g0)
    geom.update({k.replace(".dynamic", ".idx"): v for k, v in g0.items() if k.endswith(".dynamic")})

    def loss(grad=False):
        ctx = Ctx(ck.params, ck.buffers, training=True, update_stats=False, grad=grad)
        with ad.Tape() as tape:
            L = ad.softmax_cross_entropy(network(ctx, spec, pos, dict(geom)), lab)
            if grad:
                tape.backward(L)
        return L.item(), ctx.gradients()

    _, grads = loss(True)
    worst = 0.0
    for name, arr in ck.params.items():
        for j in rng.choice(arr.size, min(arr.size, per_param), replace=False):
            old, an, err = arr.flat[j], grads[name].flat[j], np.inf
            for h in (1e-5, 1e-6):
                arr.flat[j] = old + h
                lp = loss()[0]
                arr.flat[j] = old - h
                lm = loss()[0]
                arr.flat[j] = old
                err = min(err, float(rel_err(an, (lp - lm) / (2 * h))))
            worst = max(worst, err)
    return worst
