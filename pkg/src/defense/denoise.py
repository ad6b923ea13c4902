"""Non-local means feature denoising (embedded gaussian) for the image backbone."""
from typing import Dict, Optional

import numpy as np

from ..autodiff import tensor as T
from ..autodiff.tensor import ShapeError, Value

NONLOCAL_PREFIX = "img.nl"


def init_nonlocal_params(channels: int, rng: Optional[np.random.Generator] = None,
                         prefix: str = NONLOCAL_PREFIX) -> Dict[str, np.ndarray]:
    """Embedding convs at half width; the output projection starts at zero so the block is the identity."""
    rng = rng or np.random.default_rng(0)
    inner = max(1, channels // 2)
    std = np.sqrt(1.0 / channels)
    params = {}
    for name in ("theta", "phi", "g"):
        params[f"{prefix}.{name}.w"] = rng.normal(0.0, std, size=(inner, channels, 1, 1))
        params[f"{prefix}.{name}.b"] = np.zeros(inner)
    params[f"{prefix}.z.w"] = np.zeros((channels, inner, 1, 1))
    params[f"{prefix}.z.b"] = np.zeros(channels)
    return params


def _pool(x: Value, factor: int) -> Value:
    """Average-pool (C, h, w) by ``factor``, dropping the ragged border."""
    c, h, w = x.shape
    hh, ww = h // factor, w // factor
    if hh == 0 or ww == 0:
        raise ShapeError(f"Cannot subsample a {h}x{w} map by {factor}")
    x = T.index(x, (slice(None), slice(0, hh * factor), slice(0, ww * factor)))
    return T.reduce_mean(T.reshape(x, (c, hh, factor, ww, factor)), axis=(2, 4))


def nonlocal_block(features: Value, params, prefix: str = NONLOCAL_PREFIX, subsample: int = 1) -> Value:
    """x + W_z(softmax(theta(x)^T phi(x)) g(x)) over all spatial positions of a (C, h, w) map."""
    c, h, w = features.shape
    theta = T.conv2d(features, params[f"{prefix}.theta.w"], params[f"{prefix}.theta.b"])
    phi = T.conv2d(features, params[f"{prefix}.phi.w"], params[f"{prefix}.phi.b"])
    g = T.conv2d(features, params[f"{prefix}.g.w"], params[f"{prefix}.g.b"])
    if subsample > 1:
        phi, g = _pool(phi, subsample), _pool(g, subsample)
    inner = theta.shape[0]
    theta = T.reshape(theta, (inner, -1))
    phi = T.reshape(phi, (inner, -1))
    g = T.reshape(g, (inner, -1))
    attention = T.softmax(T.matmul(T.transpose(theta), phi), axis=-1)
    y = T.reshape(T.transpose(T.matmul(attention, T.transpose(g))), (inner, h, w))
    return features + T.conv2d(y, params[f"{prefix}.z.w"], params[f"{prefix}.z.b"])
