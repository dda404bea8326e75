"""SVDF layers, stacked 1D CNN units, batch norm and the linear head.

All maps are ``(..., channels, T)`` arrays; any leading axes are batch axes.
Time boundaries are zero padded: a time filter with ``K`` taps and lookahead
``L`` sees ``K-1-L`` zero frames on the left and ``L`` on the right. Padding is
applied to the first-stage outputs, so a padded slot contributes 0 rather than
``g1(b)``. This is what a streaming state that starts out empty computes.

Each forward accepts an optional ``cache`` dict; pass one in to record what the
matching ``*_backward`` needs. Backward functions return
``(input_grad, {param_name: grad})``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, StateError


class Activation(IntEnum):
    IDENTITY = 0
    RELU = 1
    SIGMOID = 2

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self is Activation.IDENTITY:
            return z
        if self is Activation.RELU:
            return np.maximum(z, 0)
        return 1 / (1 + np.exp(-z))

    def grad(self, z: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the pre-activation ``z``."""
        if self is Activation.IDENTITY:
            return upstream
        if self is Activation.RELU:
            return upstream * (z > 0)
        s = 1 / (1 + np.exp(-z))
        return upstream * s * (1 - s)


@dataclass
class S1DCNNUnit:
    """A feature-axis 1D conv followed by a depthwise time conv.

    ``feature_weights`` is ``(N, F)``, ``time_weights`` is ``(N, K)``; tap
    ``k`` (0-based) of the time filter reads frame ``t - K + 1 + k + L``.
    """

    feature_weights: np.ndarray
    feature_bias: np.ndarray
    time_weights: np.ndarray
    time_bias: np.ndarray
    lookahead: int = 0
    g1: Activation = Activation.IDENTITY
    g2: Activation = Activation.RELU

    def __post_init__(self):
        n, f = self.feature_weights.shape
        n2, k = self.time_weights.shape
        if n2 != n or self.feature_bias.shape != (n,) or self.time_bias.shape != (n,):
            raise ShapeError("inconsistent filter counts in S1DCNN unit")
        if not 0 <= self.lookahead <= k - 1:
            raise ShapeError(f"lookahead {self.lookahead} outside [0, {k - 1}]")
        self.g1 = Activation(self.g1)
        self.g2 = Activation(self.g2)

    @property
    def filters(self) -> int:
        return self.feature_weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.feature_weights.shape[1]

    @property
    def memory(self) -> int:
        return self.time_weights.shape[1]

    def num_params(self) -> int:
        """``N*(F + K + 2)``, against ``N*F*K`` for the dense filter it factorises."""
        return (self.feature_weights.size + self.feature_bias.size
                + self.time_weights.size + self.time_bias.size)


@dataclass
class SvdfLayer:
    """Rank-1 per node: feature filter ``beta`` ``(N, F)``, time filter ``alpha``
    ``(N, K)``. No biases, no lookahead."""

    beta: np.ndarray
    alpha: np.ndarray
    g: Activation = Activation.RELU

    def __post_init__(self):
        if self.beta.shape[0] != self.alpha.shape[0]:
            raise ShapeError("beta and alpha disagree on node count")
        self.g = Activation(self.g)

    @property
    def filters(self) -> int:
        return self.beta.shape[0]

    @property
    def in_dim(self) -> int:
        return self.beta.shape[1]

    @property
    def memory(self) -> int:
        return self.alpha.shape[1]

    def num_params(self) -> int:
        return self.beta.size + self.alpha.size


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta_shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def identity(cls, n: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32) -> "BatchNorm":
        return cls(np.ones(n, dtype), np.zeros(n, dtype), np.zeros(n, dtype), np.ones(n, dtype),
                   eps, momentum)


@dataclass
class Linear:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("bias length does not match output size")


def _check_dim(x: np.ndarray, expected: int, what: str) -> None:
    if x.ndim < 2 or x.shape[-2] != expected:
        raise ShapeError(f"{what}: expected {expected} input channels, got shape {x.shape}")


def _need(cache: dict | None, key: str) -> None:
    if not cache or key not in cache:
        raise StateError("backward called without a forward cache")


def _flat(a: np.ndarray, trailing: int = 2) -> np.ndarray:
    """Merge all leading batch axes into one."""
    return a.reshape((-1,) + a.shape[a.ndim - trailing:])


def _outer_sum(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``sum_b g[b] @ x[b].T`` for ``(..., N, T)`` and ``(..., F, T)``."""
    return (_flat(g) @ _flat(x).transpose(0, 2, 1)).sum(axis=0)


def _sum_to_channels(g: np.ndarray) -> np.ndarray:
    """Sum a ``(..., N, T)`` gradient down to ``(N,)``."""
    return g.reshape(-1, g.shape[-2], g.shape[-1]).sum(axis=(0, 2))


# --- first stage: feature conv ----------------------------------------------

def feature_conv(unit: S1DCNNUnit, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Per-frame affine map over the feature axis followed by ``g1``."""
    _check_dim(x, unit.in_dim, "feature_conv")
    z = unit.feature_weights @ x + unit.feature_bias[:, None]
    if cache is not None:
        cache["x"] = x
        cache["z1"] = z
    return unit.g1(z)


def feature_conv_backward(unit: S1DCNNUnit, cache: dict, grad: np.ndarray):
    _need(cache, "z1")
    x = cache["x"]
    gz = unit.g1.grad(cache["z1"], grad)
    dw = _outer_sum(gz, x)
    db = _sum_to_channels(gz)
    dx = unit.feature_weights.T @ gz
    return dx, {"feature_weights": dw, "feature_bias": db}


# --- second stage: depthwise time conv ----------------------------------------

def _pad_time(a: np.ndarray, k: int, lookahead: int) -> np.ndarray:
    pad = [(0, 0)] * (a.ndim - 1) + [(k - 1 - lookahead, lookahead)]
    return np.pad(a, pad)


def depthwise_time_conv(unit: S1DCNNUnit, a: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Channel ``n`` of the output depends only on channel ``n`` of ``a``."""
    _check_dim(a, unit.filters, "depthwise_time_conv")
    k, t = unit.memory, a.shape[-1]
    padded = _pad_time(a, k, unit.lookahead)
    z = unit.time_weights[:, 0, None] * padded[..., 0:t]
    for j in range(1, k):
        z += unit.time_weights[:, j, None] * padded[..., j:j + t]
    z += unit.time_bias[:, None]
    if cache is not None:
        cache["padded"] = padded
        cache["z2"] = z
    return unit.g2(z)


def depthwise_time_conv_backward(unit: S1DCNNUnit, cache: dict, grad: np.ndarray):
    _need(cache, "z2")
    gz = unit.g2.grad(cache["z2"], grad)
    padded = cache["padded"]
    k, lookahead = unit.memory, unit.lookahead
    t = gz.shape[-1]
    gzf = _flat(gz)
    dw = np.empty_like(unit.time_weights)
    da_pad = np.zeros(padded.shape, dtype=gz.dtype)
    for j in range(k):
        dw[:, j] = np.einsum("bnt,bnt->n", _flat(padded[..., j:j + t]), gzf)
        da_pad[..., j:j + t] += unit.time_weights[:, j, None] * gz
    db = _sum_to_channels(gz)
    left = k - 1 - lookahead
    return da_pad[..., left:left + t], {"time_weights": dw, "time_bias": db}


def unit_forward(unit: S1DCNNUnit, x: np.ndarray, mask: np.ndarray | None = None,
                 cache: dict | None = None) -> np.ndarray:
    """Feature conv then depthwise time conv.

    ``mask`` (``(..., T)``, 1 for real frames) zeroes first-stage outputs on
    padded frames of a ragged batch so each sequence sees its own zero padding.
    """
    c1 = {} if cache is not None else None
    c2 = {} if cache is not None else None
    a = feature_conv(unit, x, c1)
    if mask is not None:
        a = a * mask[..., None, :]
    out = depthwise_time_conv(unit, a, c2)
    if cache is not None:
        cache.update(first=c1, second=c2, mask=mask)
    return out


def unit_backward(unit: S1DCNNUnit, cache: dict, grad: np.ndarray):
    _need(cache, "second")
    da, g2 = depthwise_time_conv_backward(unit, cache["second"], grad)
    if cache["mask"] is not None:
        da = da * cache["mask"][..., None, :]
    dx, g1 = feature_conv_backward(unit, cache["first"], da)
    return dx, {**g1, **g2}


# --- SVDF ----------------------------------------------------------------------

def svdf_forward(layer: SvdfLayer, x: np.ndarray) -> np.ndarray:
    """Each node applies its rank-1 ``F x K`` filter ``outer(beta, alpha)`` to
    the last ``K`` input frames (zero before the first frame).

    Evaluated as one dense filter over the raw input window, independently of
    the two-stage route in :func:`unit_forward`.
    """
    _check_dim(x, layer.in_dim, "svdf_forward")
    k = layer.memory
    windows = sliding_window_view(_pad_time(x, k, 0), k, axis=-1)  # (..., F, T, K)
    dense = layer.beta[:, :, None] * layer.alpha[:, None, :]  # (N, F, K)
    z = np.einsum("...ftk,nfk->...nt", windows, dense)
    return layer.g(z)


def reduce_svdf_to_unit(layer: SvdfLayer) -> S1DCNNUnit:
    """The S1DCNN unit computing exactly what ``layer`` computes: identity
    first stage, zero biases, no lookahead. Weight arrays are shared, not copied."""
    n = layer.filters
    dtype = layer.beta.dtype
    return S1DCNNUnit(
        feature_weights=layer.beta,
        feature_bias=np.zeros(n, dtype),
        time_weights=layer.alpha,
        time_bias=np.zeros(n, dtype),
        lookahead=0,
        g1=Activation.IDENTITY,
        g2=layer.g,
    )


# --- batch norm ------------------------------------------------------------------

def batchnorm_forward(bn: BatchNorm, a: np.ndarray, mode: str = "infer",
                      mask: np.ndarray | None = None, cache: dict | None = None) -> np.ndarray:
    """Normalise each channel.

    ``infer`` uses the running statistics. ``train`` uses the mean and (biased)
    variance over every frame in the batch, honouring ``mask``, and folds them
    into the running statistics with ``bn.momentum``.
    """
    _check_dim(a, bn.gamma.shape[0], "batchnorm")
    g = bn.gamma[:, None]
    b = bn.beta_shift[:, None]
    if mode == "infer":
        inv_std = 1 / np.sqrt(bn.running_var[:, None] + bn.eps)
        xhat = (a - bn.running_mean[:, None]) * inv_std
        if cache is not None:
            cache.update(mode="infer", xhat=xhat, scale=g * inv_std, mask=mask)
        return g * xhat + b
    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    n_ch = a.shape[-2]
    flat = np.moveaxis(a, -2, 0).reshape(n_ch, -1)
    if mask is None:
        w = np.ones(flat.shape[1], dtype=a.dtype)
    else:
        w = np.broadcast_to(mask, a.shape[:-2] + a.shape[-1:]).reshape(-1).astype(a.dtype)
    count = w.sum()
    mean = (flat * w).sum(axis=1) / count
    var = (((flat - mean[:, None]) ** 2) * w).sum(axis=1) / count
    inv_std = 1 / np.sqrt(var + bn.eps)
    xhat = (a - mean[:, None]) * inv_std[:, None]
    out = g * xhat + b

    m = bn.momentum
    bn.running_mean[...] = (1 - m) * bn.running_mean + m * mean
    bn.running_var[...] = (1 - m) * bn.running_var + m * var
    if cache is not None:
        cache.update(mode="train", xhat=xhat, inv_std=inv_std, mask=mask, count=count)
    return out


def batchnorm_backward(bn: BatchNorm, cache: dict, grad: np.ndarray):
    _need(cache, "xhat")
    xhat = cache["xhat"]
    if cache["mask"] is not None:
        grad = grad * cache["mask"][..., None, :]
    dgamma = _sum_to_channels(grad * xhat)
    dbeta = _sum_to_channels(grad)
    params = {"gamma": dgamma, "beta_shift": dbeta}
    if cache["mode"] == "infer":
        return grad * cache["scale"], params
    dxhat = grad * bn.gamma[:, None]
    count = cache["count"]
    mean_d = _sum_to_channels(dxhat) / count
    mean_dx = _sum_to_channels(dxhat * xhat) / count
    dx = (dxhat - mean_d[:, None] - xhat * mean_dx[:, None]) * cache["inv_std"][:, None]
    if cache["mask"] is not None:
        dx = dx * cache["mask"][..., None, :]
    return dx, params


# --- linear head -----------------------------------------------------------------

def linear_forward(lin: Linear, h: np.ndarray, cache: dict | None = None) -> np.ndarray:
    _check_dim(h, lin.weights.shape[1], "linear")
    if cache is not None:
        cache["h"] = h
    return lin.weights @ h + lin.bias[:, None]


def linear_backward(lin: Linear, cache: dict, grad: np.ndarray):
    _need(cache, "h")
    h = cache["h"]
    dw = _outer_sum(grad, h)
    db = _sum_to_channels(grad)
    return lin.weights.T @ grad, {"weights": dw, "bias": db}
