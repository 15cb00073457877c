"""Feature pyramid on top of the four backbone stages: P2..P5 top-down, P6 by max-pool."""
from __future__ import annotations

import numpy as np

from .swin_backbone import check_weights
from .tensor_core import ShapeError, conv2d, maxpool2, upsample_nearest2x

FPN_CHANNELS = 256


def param_shapes(in_channels=(96, 192, 384, 768), out_channels: int = FPN_CHANNELS) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i, c in enumerate(in_channels):
        shapes[f"fpn.lateral.{i}.weight"] = (out_channels, c, 1, 1)
        shapes[f"fpn.lateral.{i}.bias"] = (out_channels,)
        shapes[f"fpn.output.{i}.weight"] = (out_channels, out_channels, 3, 3)
        shapes[f"fpn.output.{i}.bias"] = (out_channels,)
    return shapes


def build_pyramid(features: list[np.ndarray], weights: dict, out_channels: int = FPN_CHANNELS) -> list[np.ndarray]:
    """Stage maps [C_i,S_i,S_i] (finest first) -> [P2, ..., P(n+1), P(n+2)].

    The top-down sum lateral_i + up2x(sum_{i+1}) is formed on unsmoothed maps,
    then every level gets its own 3x3 conv. The extra coarsest level is a
    2x2 max-pool of the last smoothed map.
    """
    in_channels = tuple(f.shape[0] for f in features)
    check_weights(weights, param_shapes(in_channels, out_channels))
    laterals = [
        conv2d(f, weights[f"fpn.lateral.{i}.weight"], weights[f"fpn.lateral.{i}.bias"])
        for i, f in enumerate(features)
    ]
    for i in range(len(laterals) - 2, -1, -1):
        up = upsample_nearest2x(laterals[i + 1])
        if up.shape != laterals[i].shape:
            raise ShapeError(f"FPN level {i}: top-down {up.shape} vs lateral {laterals[i].shape}")
        laterals[i] = laterals[i] + up
    outs = [
        conv2d(lat, weights[f"fpn.output.{i}.weight"], weights[f"fpn.output.{i}.bias"], stride=1, pad=1)
        for i, lat in enumerate(laterals)
    ]
    outs.append(maxpool2(outs[-1]))
    return outs
