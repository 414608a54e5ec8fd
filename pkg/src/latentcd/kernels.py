"""Dense tensor primitives with hand-written backward passes.

Everything the encoder/decoder needs is covered by five primitives:
3x3 convolution, leaky ReLU, batch normalisation, nearest-neighbour 2x
upsampling and a fully connected layer. There is no autodiff graph; the
architecture is static, so each layer caches what its own backward pass
needs and the network composes them in a fixed order.

All tensors are NumPy arrays in (batch, channels, height, width) layout,
float32 by default, float64 when gradient-checking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError

KERNEL = 3  # all convolutions in this architecture are 3x3


def check_finite(arr, context=""):
    """Raise NumericError unless every element of `arr` is finite."""
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {context or 'tensor'}")


def as_tensor_map(arr, dtype=None):
    """Validate a 4-D (N, C, H, W) tensor; returns a contiguous array."""
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if arr.ndim != 4:
        raise DimensionError(f"expected 4-D (N,C,H,W) tensor, got shape {arr.shape}")
    check_finite(arr, "tensor map")
    return arr


def conv_out_size(size, stride, pad):
    return (size + 2 * pad - KERNEL) // stride + 1


def _im2col(x, stride, pad):
    """Unfold 3x3 patches: (N,C,H,W) -> (N, C*9, OH*OW)."""
    n, c, h, w = x.shape
    oh = conv_out_size(h, stride, pad)
    ow = conv_out_size(w, stride, pad)
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"input {h}x{w} too small for 3x3 conv (stride={stride}, pad={pad})")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, KERNEL * KERNEL, oh, ow), dtype=x.dtype)
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            cols[:, :, ki * KERNEL + kj] = x[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
    return cols.reshape(n, c * KERNEL * KERNEL, oh * ow), (oh, ow)


def _col2im(grad_cols, x_shape, stride, pad):
    """Adjoint of _im2col: scatter-add column gradients back to (N,C,H,W)."""
    n, c, h, w = x_shape
    oh = conv_out_size(h, stride, pad)
    ow = conv_out_size(w, stride, pad)
    grad_cols = grad_cols.reshape(n, c, KERNEL * KERNEL, oh, ow)
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad_cols.dtype)
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            gx[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += grad_cols[:, :, ki * KERNEL + kj]
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return gx


def conv2d(x, weight, bias, stride=1, pad=1):
    """3x3 convolution. weight: (out_ch, in_ch, 3, 3), bias: (out_ch,)."""
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if pad not in (0, 1):
        raise ValueError(f"pad must be 0 or 1, got {pad}")
    out_ch, in_ch, kh, kw = weight.shape
    if (kh, kw) != (KERNEL, KERNEL):
        raise DimensionError(f"kernel must be 3x3, got {kh}x{kw}")
    if x.ndim != 4 or x.shape[1] != in_ch:
        raise DimensionError(f"input shape {x.shape} incompatible with weight {weight.shape}")
    out, _ = _conv2d_cached(x, weight, bias, stride, pad)
    return out


def _conv2d_cached(x, weight, bias, stride, pad):
    out_ch, in_ch = weight.shape[:2]
    cols, (oh, ow) = _im2col(x, stride, pad)
    wm = weight.reshape(out_ch, in_ch * KERNEL * KERNEL)
    out = np.matmul(wm, cols)  # (N, out_ch, OH*OW) via broadcasting
    out = out.reshape(x.shape[0], out_ch, oh, ow) + bias.reshape(1, out_ch, 1, 1)
    check_finite(out, "conv2d output")
    return out, cols


def conv2d_backward(grad_out, x, weight, stride=1, pad=1, _cols=None):
    """Analytic gradients of conv2d: returns (grad_input, grad_weight, grad_bias)."""
    out_ch, in_ch = weight.shape[:2]
    oh = conv_out_size(x.shape[2], stride, pad)
    ow = conv_out_size(x.shape[3], stride, pad)
    if grad_out.shape != (x.shape[0], out_ch, oh, ow):
        raise DimensionError(f"grad_out shape {grad_out.shape} != forward output "
                             f"{(x.shape[0], out_ch, oh, ow)}")
    cols = _cols if _cols is not None else _im2col(x, stride, pad)[0]
    g = grad_out.reshape(x.shape[0], out_ch, oh * ow)
    grad_w = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
    grad_b = g.sum(axis=(0, 2))
    wm = weight.reshape(out_ch, in_ch * KERNEL * KERNEL)
    grad_cols = np.matmul(wm.T, g)
    grad_x = _col2im(grad_cols, x.shape, stride, pad)
    return grad_x, grad_w, grad_b


def leaky_relu(x, negative_slope=0.01):
    if not 0.0 < negative_slope < 1.0:
        raise ValueError(f"negative_slope must lie in (0,1), got {negative_slope}")
    return np.where(x >= 0, x, negative_slope * x)


def leaky_relu_backward(grad_out, x, negative_slope=0.01):
    return np.where(x >= 0, grad_out, negative_slope * grad_out)


def upsample_nearest2x(x):
    """Replicate every pixel into a 2x2 block."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nearest2x_backward(grad_out):
    """Adjoint of upsample_nearest2x: sum each 2x2 block."""
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def linear(x, weight, bias):
    """Affine map: x (N, F) -> x @ W.T + b with weight (out, F)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"input length {x.shape[-1]} != weight columns {weight.shape[1]}")
    return x @ weight.T + bias


def linear_backward(grad_out, x, weight):
    grad_x = grad_out @ weight
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def batchnorm_infer(x, gamma, beta, running_mean, running_var, eps=1e-5):
    if np.any(running_var <= 0):
        raise NumericError("batchnorm running_var must be strictly positive")
    inv = 1.0 / np.sqrt(running_var + eps)
    scale = (gamma * inv).reshape(1, -1, 1, 1)
    shift = (beta - gamma * running_mean * inv).reshape(1, -1, 1, 1)
    return x * scale + shift


def batchnorm_train(x, gamma, beta, eps=1e-5):
    """Normalize by batch statistics over (N, H, W) per channel.

    Returns (out, cache); cache feeds batchnorm_train_backward.
    """
    n, c, h, w = x.shape
    if n * h * w < 2:
        raise DimensionError("batchnorm train mode needs >= 2 values per channel")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.reshape(1, c, 1, 1) * xhat + beta.reshape(1, c, 1, 1)
    cache = (xhat, inv_std)
    return out, cache, mean, var


def batchnorm_train_backward(grad_out, cache, gamma):
    xhat, inv_std = cache
    n, c, h, w = grad_out.shape
    m = n * h * w
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    gxhat = grad_out * gamma.reshape(1, c, 1, 1)
    gx = (inv_std.reshape(1, c, 1, 1) / m) * (
        m * gxhat
        - gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
    )
    return gx, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Layer objects: thin stateful wrappers used to compose the static network.
# ---------------------------------------------------------------------------

class Layer:
    """Base layer; subclasses cache forward inputs for their backward pass."""

    def params(self):
        """List of (name, value, grad) triples; arrays are updated in place."""
        return []

    def buffers(self):
        """Non-learnable state that still needs (de)serialising."""
        return []

    def forward(self, x, mode="train"):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, stride=1, pad=1, *, rng, dtype=np.float32):
        fan_in = in_ch * KERNEL * KERNEL
        w = rng.standard_normal((out_ch, in_ch, KERNEL, KERNEL)) * np.sqrt(2.0 / fan_in)
        self.weight = w.astype(dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)
        self.gw = np.zeros_like(self.weight)
        self.gb = np.zeros_like(self.bias)
        self.stride = stride
        self.pad = pad
        self._x = None
        self._cols = None

    def params(self):
        return [("weight", self.weight, self.gw), ("bias", self.bias, self.gb)]

    def forward(self, x, mode="train"):
        self._x = x
        if x.shape[1] != self.weight.shape[1]:
            raise DimensionError(
                f"input channels {x.shape[1]} != conv in_channels {self.weight.shape[1]}")
        out, self._cols = _conv2d_cached(x, self.weight, self.bias, self.stride, self.pad)
        return out

    def backward(self, grad_out):
        gx, gw, gb = conv2d_backward(grad_out, self._x, self.weight, self.stride, self.pad,
                                     _cols=self._cols)
        self.gw += gw
        self.gb += gb
        return gx


class BatchNorm2d(Layer):
    def __init__(self, channels, eps=1e-5, momentum=0.1, *, dtype=np.float32):
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)
        self.eps = eps
        self.momentum = momentum
        self._cache = None
        self._mode = "train"

    def params(self):
        return [("gamma", self.gamma, self.ggamma), ("beta", self.beta, self.gbeta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, mode="train"):
        self._mode = mode
        if mode == "infer":
            self._x = x
            return batchnorm_infer(x, self.gamma, self.beta,
                                   self.running_mean, self.running_var, self.eps)
        out, cache, mean, var = batchnorm_train(x, self.gamma, self.beta, self.eps)
        self._cache = cache
        self.running_mean *= 1.0 - self.momentum
        self.running_mean += self.momentum * mean.astype(self.running_mean.dtype)
        self.running_var *= 1.0 - self.momentum
        self.running_var += self.momentum * var.astype(self.running_var.dtype)
        return out

    def backward(self, grad_out):
        if self._mode == "infer":
            c = grad_out.shape[1]
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (self._x - self.running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
            self.ggamma += (grad_out * xhat).sum(axis=(0, 2, 3))
            self.gbeta += grad_out.sum(axis=(0, 2, 3))
            return grad_out * (self.gamma * inv).reshape(1, c, 1, 1)
        gx, ggamma, gbeta = batchnorm_train_backward(grad_out, self._cache, self.gamma)
        self.ggamma += ggamma
        self.gbeta += gbeta
        return gx


class LeakyReLU(Layer):
    def __init__(self, negative_slope=0.01):
        self.slope = negative_slope
        self._x = None

    def forward(self, x, mode="train"):
        self._x = x
        return leaky_relu(x, self.slope)

    def backward(self, grad_out):
        return leaky_relu_backward(grad_out, self._x, self.slope)


class UpsampleNearest2x(Layer):
    def forward(self, x, mode="train"):
        return upsample_nearest2x(x)

    def backward(self, grad_out):
        return upsample_nearest2x_backward(grad_out)


class Linear(Layer):
    def __init__(self, in_features, out_features, *, rng, dtype=np.float32):
        w = rng.standard_normal((out_features, in_features)) * np.sqrt(2.0 / in_features)
        self.weight = w.astype(dtype)
        self.bias = np.zeros(out_features, dtype=dtype)
        self.gw = np.zeros_like(self.weight)
        self.gb = np.zeros_like(self.bias)
        self._x = None

    def params(self):
        return [("weight", self.weight, self.gw), ("bias", self.bias, self.gb)]

    def forward(self, x, mode="train"):
        self._x = x
        return linear(x, self.weight, self.bias)

    def backward(self, grad_out):
        gx, gw, gb = linear_backward(grad_out, self._x, self.weight)
        self.gw += gw
        self.gb += gb
        return gx


class Flatten(Layer):
    def forward(self, x, mode="train"):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._shape)


class Reshape(Layer):
    """(N, F) -> (N, C, H, W) with fixed target (C, H, W)."""

    def __init__(self, chw):
        self.chw = chw

    def forward(self, x, mode="train"):
        return x.reshape(x.shape[0], *self.chw)

    def backward(self, grad_out):
        return grad_out.reshape(grad_out.shape[0], -1)


class Sigmoid(Layer):
    def forward(self, x, mode="train"):
        # numerically stable logistic
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._out = out
        return out

    def backward(self, grad_out):
        return grad_out * self._out * (1.0 - self._out)


class Residual(Layer):
    """Skip connection around a channel-preserving chain of layers."""

    def __init__(self, inner):
        self.inner = inner

    def params(self):
        return [(f"{i}.{n}", v, g) for i, l in enumerate(self.inner) for n, v, g in l.params()]

    def buffers(self):
        return [(f"{i}.{n}", v) for i, l in enumerate(self.inner) for n, v in l.buffers()]

    def forward(self, x, mode="train"):
        y = x
        for layer in self.inner:
            y = layer.forward(y, mode)
        return x + y

    def backward(self, grad_out):
        g = grad_out
        for layer in reversed(self.inner):
            g = layer.backward(g)
        return grad_out + g


def zero_grads(layers):
    for layer in layers:
        for _, _, grad in layer.params():
            grad[...] = 0.0


def run_forward(layers, x, mode="train"):
    for layer in layers:
        x = layer.forward(x, mode)
    return x


def run_backward(layers, grad):
    for layer in reversed(layers):
        grad = layer.backward(grad)
    return grad


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: float
    per_tensor: dict = field(default_factory=dict)  # name -> worst rel error

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance

    def worst_offenders(self, n=5):
        return sorted(self.per_tensor.items(), key=lambda kv: -kv[1])[:n]


def grad_check(net, x, tolerance=1e-4, *, rng=None, probes=3, step=1e-5):
    """Compare analytic gradients with central finite differences.

    `net` must expose `loss(x) -> float` (deterministic), `loss_and_grad(x)
    -> float` (fills parameter gradients) and `param_tensors() -> list of
    (name, value, grad)`. Each parameter tensor is probed along `probes`
    random unit directions; the analytic directional derivative is compared
    against (L(p+hv) - L(p-hv)) / 2h.
    """
    rng = rng or np.random.default_rng(0)
    base_loss = net.loss_and_grad(x)
    # directions whose true derivative is ~0 (e.g. conv bias ahead of a
    # train-mode BN) would otherwise compare FD roundoff against zero
    floor = 1e-7 * (1.0 + abs(float(base_loss)))
    per_tensor = {}
    for name, value, grad in net.param_tensors():
        analytic_grad = grad.copy()
        worst = 0.0
        for _ in range(probes):
            v = rng.standard_normal(value.shape)
            v /= np.linalg.norm(v) + 1e-30
            v = v.astype(value.dtype)
            analytic = float((analytic_grad * v).sum())
            value += step * v
            lp = net.loss(x)
            value -= 2.0 * step * v
            lm = net.loss(x)
            value += step * v
            fd = (lp - lm) / (2.0 * step)
            denom = max(abs(analytic), abs(fd))
            if denom > floor:
                worst = max(worst, abs(analytic - fd) / denom)
        per_tensor[name] = worst
    max_rel = max(per_tensor.values()) if per_tensor else 0.0
    return GradCheckReport(tolerance=tolerance, max_rel_error=max_rel, per_tensor=per_tensor)
