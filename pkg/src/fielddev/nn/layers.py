"""Minimal batched layers with exact analytic gradients, float64 throughout.

Every layer caches what its backward pass needs during forward; backward
returns the input gradient and stores parameter gradients on the layer.
Convolutions are stride one; 'valid' shrinks the map, 'same' (odd kernels
only) preserves it for residual blocks.
"""

from __future__ import annotations

import numpy as np

from ..errors import LifecycleError, ShapeError

MASK_LOGIT = -1.0e9


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Common plumbing: named parameters and their gradients."""

    name: str

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def _require_forward(self, cache):
        if cache is None:
            raise LifecycleError(f"{self.name}: backward called before forward")


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B,H,W,C) -> (B,OH,OW,kh*kw*C) patch matrix via stride tricks."""
    x = np.ascontiguousarray(x)
    b, h, w, c = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    s0, s1, s2, s3 = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x, (b, oh, ow, kh, kw, c), (s0, s1, s2, s1, s2, s3), writeable=False
    )
    return patches.reshape(b, oh, ow, kh * kw * c)


class Conv2D(Layer):
    """Stride-one 2D convolution over (B, H, W, C) maps."""

    def __init__(self, name: str, in_channels: int, filters: int, kernel: int,
                 padding: str, rng: np.random.Generator):
        if padding not in ("valid", "same"):
            raise ShapeError(f"{name}: padding must be 'valid' or 'same'")
        if padding == "same" and kernel % 2 == 0:
            raise ShapeError(f"{name}: 'same' padding requires an odd kernel")
        self.name = name
        self.in_channels = in_channels
        self.filters = filters
        self.kernel = kernel
        self.padding = padding
        fan_in = kernel * kernel * in_channels
        self.w = he_uniform(rng, (fan_in, filters), fan_in)
        self.b = np.zeros(filters)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cache = None

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        if self.padding == "same":
            return h, w
        oh, ow = h - self.kernel + 1, w - self.kernel + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self.name}: {h}x{w} input too small for kernel {self.kernel}")
        return oh, ow

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeError(f"{self.name}: expected (B,H,W,{self.in_channels}), got {x.shape}")
        self.out_size(x.shape[1], x.shape[2])
        pad = self.kernel // 2 if self.padding == "same" else 0
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        patches = _im2col(xp, self.kernel, self.kernel)
        y = patches @ self.w + self.b
        self._cache = (x.shape, patches, pad)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self._require_forward(self._cache)
        x_shape, patches, pad = self._cache
        b, oh, ow, f = dy.shape
        flat_patches = patches.reshape(-1, patches.shape[-1])
        flat_dy = dy.reshape(-1, f)
        self.dw = flat_patches.T @ flat_dy
        self.db = flat_dy.sum(axis=0)
        dpatch = (flat_dy @ self.w.T).reshape(b, oh, ow, self.kernel, self.kernel, self.in_channels)
        hp, wp = x_shape[1] + 2 * pad, x_shape[2] + 2 * pad
        dxp = np.zeros((b, hp, wp, self.in_channels))
        for a in range(self.kernel):
            for c in range(self.kernel):
                dxp[:, a:a + oh, c:c + ow, :] += dpatch[:, :, :, a, c, :]
        return dxp[:, pad:hp - pad, pad:wp - pad, :] if pad else dxp

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def grads(self):
        return {f"{self.name}.w": self.dw, f"{self.name}.b": self.db}


class Dense(Layer):
    def __init__(self, name: str, in_features: int, units: int, rng: np.random.Generator):
        self.name = name
        self.in_features = in_features
        self.units = units
        self.w = he_uniform(rng, (in_features, units), in_features)
        self.b = np.zeros(units)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self.name}: expected (B,{self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.w + self.b

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self._require_forward(self._cache)
        x = self._cache
        self.dw = x.T @ dy
        self.db = dy.sum(axis=0)
        return dy @ self.w.T

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def grads(self):
        return {f"{self.name}.w": self.dw, f"{self.name}.b": self.db}


class ReLU(Layer):
    def __init__(self, name: str = "relu"):
        self.name = name
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self._require_forward(self._cache)
        return np.where(self._cache, dy, 0.0)


class ResidualBlock(Layer):
    """relu(x + conv2(relu(conv1(x)))) with shape-preserving 'same' convolutions."""

    def __init__(self, name: str, channels: int, kernel: int, rng: np.random.Generator):
        self.name = name
        self.conv1 = Conv2D(f"{name}.conv1", channels, channels, kernel, "same", rng)
        self.conv2 = Conv2D(f"{name}.conv2", channels, channels, kernel, "same", rng)
        self.relu1 = ReLU(f"{name}.relu1")
        self.relu2 = ReLU(f"{name}.relu2")

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self.conv2.forward(self.relu1.forward(self.conv1.forward(x)))
        return self.relu2.forward(x + h)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        d_add = self.relu2.backward(dy)
        dx_branch = self.conv1.backward(self.relu1.backward(self.conv2.backward(d_add)))
        return d_add + dx_branch

    def params(self):
        return {**self.conv1.params(), **self.conv2.params()}

    def grads(self):
        return {**self.conv1.grads(), **self.conv2.grads()}


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def apply_mask(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Disallowed entries get a -1e9 surrogate; their softmax mass underflows to 0."""
    return np.where(mask, logits, MASK_LOGIT)


def entropy(logits: np.ndarray) -> np.ndarray:
    """Shannon entropy per row; masked entries contribute exactly zero."""
    lsm = log_softmax(logits)
    p = np.exp(lsm)
    return -(p * lsm).sum(axis=-1)


def entropy_grad(logits: np.ndarray) -> np.ndarray:
    """d entropy / d logits, rowwise: -p * (log p + H)."""
    lsm = log_softmax(logits)
    p = np.exp(lsm)
    h = -(p * lsm).sum(axis=-1, keepdims=True)
    return -p * (lsm + h)
