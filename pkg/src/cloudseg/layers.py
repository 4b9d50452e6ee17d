"""Layers, losses and the Adam optimizer.

Images are channel-last: ``N×H×W×C`` batches, or a single ``H×W×C`` image
which is treated as a batch of one. Convolutions use the cross-correlation
convention. Kernels are ``kh×kw×Cin×Cout`` for convolutions and
``kh×kw×Cout×Cin`` for transposed convolutions, so a convolution kernel used
unchanged as a transposed-convolution kernel gives the adjoint map.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError, ValidationError
from .tensor import Tensor, make_node

BN_EPS = 1e-5
PROB_CLAMP = 1e-7


@dataclass
class LayerParams:
    kernel: Optional[Tensor] = None
    bias: Optional[Tensor] = None
    gamma: Optional[Tensor] = None
    beta: Optional[Tensor] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    def trainable(self) -> dict:
        """Named trainable tensors in a fixed order."""
        out = {}
        for key in ("kernel", "bias", "gamma", "beta"):
            t = getattr(self, key)
            if t is not None:
                out[key] = t
        return out

    def arrays(self) -> dict:
        """All state (trainable and running statistics) as numpy arrays."""
        out = {k: t.data for k, t in self.trainable().items()}
        if self.running_mean is not None:
            out["running_mean"] = self.running_mean
            out["running_var"] = self.running_var
        return out

    @property
    def has_bn(self) -> bool:
        return self.gamma is not None


def _batched(x: Tensor):
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        return _reshape_raw(x, (1,) + x.shape), True
    raise DimensionError(f"expected H×W×C or N×H×W×C input, got shape {x.shape}")


def _reshape_raw(x: Tensor, shape) -> Tensor:
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return _reshape_raw(y, y.shape[1:]) if squeeze else y


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` broadcast over every axis but the last (the only broadcast supported)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias of shape {b.shape} does not match channels of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return make_node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "bias_add")


def scale_channel(x: Tensor, s: Tensor) -> Tensor:
    if s.ndim != 1 or x.shape[-1] != s.shape[0]:
        raise DimensionError(f"scale of shape {s.shape} does not match channels of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return make_node(
        x.data * s.data, (x, s),
        lambda g: (g * s.data, (g * x.data).sum(axis=axes)), "scale",
    )


def _check_bias(b: Tensor, cout: int) -> None:
    if b.shape != (cout,):
        raise DimensionError(f"bias of shape {b.shape} does not match {cout} output channels")


def _pad_amounts(k: int):
    return (k - 1) // 2, k - 1 - (k - 1) // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, padding: str = "valid") -> Tensor:
    """Stride-1 2-D convolution with ``valid`` or zero ``same`` padding."""
    if padding not in ("valid", "same"):
        raise ConfigurationError(f"unsupported padding {padding!r}")
    xb, squeeze = _batched(x)
    if kernel.ndim != 4 or kernel.shape[2] != xb.shape[3]:
        raise DimensionError(f"kernel {kernel.shape} does not match input channels of {x.shape}")
    kh, kw, cin, cout = kernel.shape
    n, h, w, _ = xb.shape
    if padding == "same":
        (pt, pb), (pl, pr) = _pad_amounts(kh), _pad_amounts(kw)
        xp = np.pad(xb.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    else:
        pt = pb = pl = pr = 0
        xp = xb.data
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {kh}×{kw} larger than padded input {xp.shape[1]}×{xp.shape[2]}")
    k = kernel.data
    out = np.zeros((n * ho * wo, cout), dtype=np.result_type(xp, k))
    if bias is not None:
        _check_bias(bias, cout)
        out += bias.data
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + ho, j:j + wo, :].reshape(-1, cin) @ k[i, j]
    out = out.reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        dxp = np.zeros_like(xp)
        dk = np.empty_like(k)
        for i in range(kh):
            for j in range(kw):
                win = xp[:, i:i + ho, j:j + wo, :]
                dk[i, j] = win.reshape(-1, cin).T @ g2
                dxp[:, i:i + ho, j:j + wo, :] += (g2 @ k[i, j].T).reshape(n, ho, wo, cin)
        dx = np.ascontiguousarray(dxp[:, pt:pt + h, pl:pl + w, :])
        return (dx, dk) if bias is None else (dx, dk, g2.sum(axis=0))

    parents = (xb, kernel) if bias is None else (xb, kernel, bias)
    return _unbatch(make_node(out, parents, backward, "conv2d"), squeeze)


def deconv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Transposed convolution (scatter-add of ``x[i, j] · kernel[a, b]``).

    Output size is ``(H - 1)·stride + kh`` by ``(W - 1)·stride + kw``. Supported:
    stride 1 with any kernel, stride 2 with a 2×2 kernel.
    """
    if kernel.ndim != 4:
        raise DimensionError(f"deconv kernel must be 4-D, got {kernel.shape}")
    kh, kw, cout, cin = kernel.shape
    if not (stride == 1 or (stride == 2 and kh == 2 and kw == 2)):
        raise ConfigurationError(f"unsupported transposed convolution: kernel {kh}×{kw}, stride {stride}")
    xb, squeeze = _batched(x)
    if xb.shape[3] != cin:
        raise DimensionError(f"deconv kernel {kernel.shape} does not match input channels of {x.shape}")
    n, h, w, _ = xb.shape
    ho, wo = (h - 1) * stride + kh, (w - 1) * stride + kw
    k = kernel.data
    xf = xb.data.reshape(-1, cin)
    out = np.zeros((n, ho, wo, cout), dtype=np.result_type(xf, k))
    if bias is not None:
        _check_bias(bias, cout)
        out += bias.data
    hs, ws = (h - 1) * stride + 1, (w - 1) * stride + 1
    for a in range(kh):
        for b in range(kw):
            out[:, a:a + hs:stride, b:b + ws:stride, :] += (xf @ k[a, b].T).reshape(n, h, w, cout)

    def backward(g):
        dx = np.zeros((n * h * w, cin), dtype=g.dtype)
        dk = np.empty_like(k)
        for a in range(kh):
            for b in range(kw):
                ga = g[:, a:a + hs:stride, b:b + ws:stride, :].reshape(-1, cout)
                dx += ga @ k[a, b]
                dk[a, b] = ga.T @ xf
        dx = dx.reshape(n, h, w, cin)
        return (dx, dk) if bias is None else (dx, dk, g.sum(axis=(0, 1, 2)))

    parents = (xb, kernel) if bias is None else (xb, kernel, bias)
    return _unbatch(make_node(out, parents, backward, "deconv2d"), squeeze)


def maxpool2(x: Tensor) -> Tensor:
    """2×2 / stride-2 max pooling. Ties go to the first window cell in row-major scan order."""
    xb, squeeze = _batched(x)
    n, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even height and width, got {h}×{w}")
    win = xb.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (dx,)

    return _unbatch(make_node(out, (xb,), backward, "maxpool2"), squeeze)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by 2 along height and width."""
    xb, squeeze = _batched(x)
    n, h, w, c = xb.shape
    out = np.repeat(np.repeat(xb.data, 2, axis=1), 2, axis=2)

    def backward(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _unbatch(make_node(out, (xb,), backward, "upsample2"), squeeze)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[-1]
    return make_node(
        np.concatenate([a.data, b.data], axis=-1), (a, b),
        lambda g: (np.ascontiguousarray(g[..., :ca]), np.ascontiguousarray(g[..., ca:])), "concat",
    )


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return make_node(out, (x,), lambda g: (g * (out > 0),), "relu")


def dropout(x: Tensor, rate: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; the identity (same object) when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("training-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def batchnorm(x: Tensor, p: LayerParams, train: bool, momentum: float = 0.9) -> Tensor:
    """Per-channel batch normalization over every non-channel axis.

    Training mode normalizes with the (biased) batch statistics and moves the
    running statistics toward them: ``running = momentum·running + (1-momentum)·batch``.
    """
    c = x.shape[-1]
    if x.size == 0:
        raise DimensionError("batchnorm on an empty batch")
    if p.gamma is None or p.gamma.shape != (c,):
        raise DimensionError(f"batchnorm parameters do not match {c} channels")
    axes = tuple(range(x.ndim - 1))
    gamma, beta = p.gamma, p.beta
    if not train:
        inv = 1.0 / np.sqrt(p.running_var + BN_EPS)
        xhat = ((x.data - p.running_mean) * inv).astype(x.dtype)
        out = xhat * gamma.data + beta.data

        def backward_infer(g):
            return g * (gamma.data * inv).astype(g.dtype), (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_node(out, (x, gamma, beta), backward_infer, "batchnorm")

    m = x.size // c
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = (x.data - mean) * inv
    out = xhat * gamma.data + beta.data
    p.running_mean = (momentum * p.running_mean + (1.0 - momentum) * mean).astype(p.running_mean.dtype)
    p.running_var = (momentum * p.running_var + (1.0 - momentum) * var).astype(p.running_var.dtype)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data
        dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        return dx.astype(x.dtype), dgamma, dbeta

    return make_node(out, (x, gamma, beta), backward, "batchnorm")


def dense(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ kernel + bias`` for ``x`` of shape N or B×N and kernel N×M."""
    if kernel.ndim != 2 or x.shape[-1] != kernel.shape[0]:
        raise DimensionError(f"dense: input {x.shape} incompatible with kernel {kernel.shape}")
    squeeze = x.ndim == 1
    xb = _reshape_raw(x, (1, x.shape[0])) if squeeze else x
    if xb.ndim != 2:
        raise DimensionError(f"dense expects a vector or a batch of vectors, got {x.shape}")
    y = make_node(
        xb.data @ kernel.data, (xb, kernel),
        lambda g: (g @ kernel.data.T, xb.data.T @ g), "dense",
    )
    if bias is not None:
        y = add_channel_bias(y, bias)
    return _reshape_raw(y, (kernel.shape[1],)) if squeeze else y


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = _softmax_np(x.data, axis)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_node(s, (x,), backward, "softmax")


def _check_one_hot(target: np.ndarray) -> None:
    ok = np.isin(target, (0.0, 1.0)).all() and np.all(target.sum(axis=-1) == 1)
    if not ok:
        raise ValidationError("target rows must be one-hot")


def cross_entropy(pred: Tensor, target) -> Tensor:
    """Mean over sites of ``-sum_k target·log(pred)`` with ``pred`` clamped to [1e-7, 1 - 1e-7]."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise DimensionError(f"prediction {pred.shape} and target {t.shape} differ")
    _check_one_hot(t)
    p = pred.data
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    sites = p.size // p.shape[-1]
    loss = -(t * np.log(pc)).sum() / sites
    inside = (p >= PROB_CLAMP) & (p <= 1.0 - PROB_CLAMP)

    def backward(g):
        return ((g * (-t / pc) * inside / sites).astype(p.dtype),)

    return make_node(np.asarray(loss, dtype=p.dtype), (pred,), backward, "cross_entropy")


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Fused log-softmax + cross-entropy over the last axis, averaged over sites."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != logits.shape:
        raise DimensionError(f"logits {logits.shape} and target {t.shape} differ")
    _check_one_hot(t)
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    sites = z.size // z.shape[-1]
    loss = -(t * logp).sum() / sites

    def backward(g):
        return (((np.exp(logp) - t) * (g / sites)).astype(z.dtype),)

    return make_node(np.asarray(loss, dtype=z.dtype), (logits,), backward, "softmax_xent")


@dataclass
class AdamState:
    lr: float = 1e-3
    decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def effective_lr(self, epoch: int) -> float:
        return self.lr / (1.0 + self.decay * epoch)


def adam_step(params: dict, state: AdamState, epoch: int = 0) -> None:
    """One in-place Adam update of ``params`` (name -> Tensor) from their ``.grad``.

    Parameters without a gradient are left untouched.
    """
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    lr = state.effective_lr(epoch)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.data.dtype)
