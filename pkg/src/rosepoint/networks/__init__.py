"""Point-set operators and the six segmentation architectures."""
from .pointops import ball_query, dilated_knn, farthest_point_sampling, interpolation_weights, knn, ri_features
from .layers import (BlockFeatures, Ctx, edge_conv, feature_propagation, ri_conv, set_abstraction, shell_conv,
                     x_conv)
from .models import (Checkpoint, CompatibilityError, build_model, check_compatible, forward, geometry, logits,
                     network, predict, stack_geometry)
from .spec import ALL_ARCHITECTURES, Architecture, LayerRecord, ModelSpec, SpecError, default_spec, with_layer

__all__ = [
    "farthest_point_sampling", "ball_query", "knn", "dilated_knn", "interpolation_weights", "ri_features",
    "BlockFeatures", "Ctx", "set_abstraction", "feature_propagation", "edge_conv", "x_conv", "shell_conv",
    "ri_conv", "Checkpoint", "CompatibilityError", "build_model", "check_compatible", "forward", "geometry",
    "logits", "network", "predict", "stack_geometry", "Architecture", "LayerRecord", "ModelSpec", "SpecError",
    "default_spec", "with_layer", "ALL_ARCHITECTURES",
]
