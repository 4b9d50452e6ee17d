"""Classification and segmentation networks for any :class:`ScaleConfig`.

The segmenter shares its encoder (boundary conv and blocks 1-4) with the
classifier, so classifier weights can be copied into it with
:func:`transfer_weights`.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import layers as L
from .errors import TransferError, ValidationError
from .layers import LayerParams
from .preprocessing import ScaleConfig
from .tensor import Tensor, no_grad

FLATTEN_CHANNELS = 512
DENSE_HIDDEN = 256
ENCODER_LAYERS = ("boundary_conv",) + tuple(
    f"block{b}_conv{i}" for b in range(1, 5) for i in (1, 2)
)


def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, shape).astype(dtype))


def _conv(rng, kh, kw, cin, cout, dtype) -> LayerParams:
    return LayerParams(
        kernel=_he_uniform(rng, (kh, kw, cin, cout), kh * kw * cin, dtype),
        bias=Tensor(np.zeros(cout, dtype=dtype)),
    )


def _deconv(rng, kh, kw, cout, cin, dtype) -> LayerParams:
    return LayerParams(
        kernel=_he_uniform(rng, (kh, kw, cout, cin), kh * kw * cin, dtype),
        bias=Tensor(np.zeros(cout, dtype=dtype)),
    )


def _with_bn(p: LayerParams, c: int, dtype) -> LayerParams:
    p.gamma = Tensor(np.ones(c, dtype=dtype))
    p.beta = Tensor(np.zeros(c, dtype=dtype))
    p.running_mean = np.zeros(c, dtype=dtype)
    p.running_var = np.ones(c, dtype=dtype)
    return p


def _encoder_params(cfg: ScaleConfig, rng, dtype) -> dict:
    params = {"boundary_conv": _conv(rng, cfg.boundary_kernel, 1, 2, 2, dtype)}
    cin = 2
    for b in range(1, 5):
        cout = cfg.c0 * 2 ** (b - 1)
        params[f"block{b}_conv1"] = _conv(rng, 3, 3, cin, cout, dtype)
        params[f"block{b}_conv2"] = _conv(rng, 3, 3, cout, cout, dtype)
        cin = cout
    return params


def named_tensors(params: dict) -> dict:
    """Trainable tensors keyed ``layer/field``."""
    return {f"{name}/{k}": t for name, p in params.items() for k, t in p.trainable().items()}


def state_arrays(params: dict) -> dict:
    """Every array of the model (trainable and running statistics) keyed ``layer/field``."""
    return {f"{name}/{k}": a for name, p in params.items() for k, a in p.arrays().items()}


def clone_params(params: dict) -> dict:
    out = {}
    for name, p in params.items():
        q = LayerParams()
        for k, t in p.trainable().items():
            setattr(q, k, Tensor(t.data.copy()))
        if p.running_mean is not None:
            q.running_mean = p.running_mean.copy()
            q.running_var = p.running_var.copy()
        out[name] = q
    return out


def load_state(params: dict, arrays: dict) -> None:
    """Overwrite ``params`` in place from ``state_arrays``-style ``arrays``."""
    expected = state_arrays(params)
    if set(expected) != set(arrays):
        missing = sorted(set(expected) ^ set(arrays))
        raise ValidationError(f"checkpoint tensors do not match the model: {missing[:5]}")
    for key, arr in arrays.items():
        layer, field = key.split("/")
        p = params[layer]
        if expected[key].shape != arr.shape:
            raise ValidationError(f"{key}: checkpoint shape {arr.shape} != model shape {expected[key].shape}")
        arr = np.asarray(arr, dtype=expected[key].dtype).copy()
        if field in ("running_mean", "running_var"):
            setattr(p, field, arr)
        else:
            getattr(p, field).data = arr


class _Network:
    kind = ""

    def __init__(self, cfg: ScaleConfig, params: dict, dropout: float = 0.0, bn_momentum: float = 0.9):
        self.cfg = cfg
        self.params = params
        self.dropout = dropout
        self.bn_momentum = bn_momentum

    def parameters(self) -> dict:
        """Trainable tensors keyed ``layer/field``, marked as requiring gradients."""
        params = named_tensors(self.params)
        for t in params.values():
            t.requires_grad = True
        return params

    def _conv(self, name, x, padding="same", act=True):
        p = self.params[name]
        y = L.conv2d(x, p.kernel, p.bias, padding)
        return L.relu(y) if act else y

    def _encode(self, x, train, rng, trace, pool_last):
        x = self._conv("boundary_conv", x, "valid", act=False)
        _record(trace, "boundary_conv", x)
        skips = {}
        for b in range(1, 6 if pool_last else 5):
            x = self._conv(f"block{b}_conv1", x)
            _record(trace, f"block{b}_conv1", x)
            x = self._conv(f"block{b}_conv2", x)
            _record(trace, f"block{b}_conv2", x)
            skips[b] = x
            if pool_last or b < 4:
                x = L.maxpool2(x)
                _record(trace, f"block{b}_pool", x)
                x = L.dropout(x, self.dropout, train, rng)
        return x, skips

    def _prepare(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim == 3:
            x = Tensor(x.data[None])
        expected = (self.cfg.h_day, self.cfg.wq, 2)
        if x.shape[1:] != expected:
            raise ValidationError(f"{self.kind} expects N×{expected[0]}×{expected[1]}×2 input, got {x.shape}")
        return x

    def predict_proba(self, x) -> np.ndarray:
        with no_grad():
            return self.forward(x, train=False).data


class Classifier(_Network):
    """Quarter-day image → [P(no cloud), P(cloud)]."""

    kind = "classifier"

    def forward(self, x, train: bool = False, rng=None, trace: Optional[dict] = None,
                logits: bool = False) -> Tensor:
        x = self._prepare(x)
        _record(trace, "input", x)
        x, _ = self._encode(x, train, rng, trace, pool_last=True)
        x = self._conv("flatten_conv", x, "valid")
        _record(trace, "flatten_conv", x)
        x = L.dropout(x, self.dropout, train, rng)
        x = L._reshape_raw(x, (x.shape[0], x.shape[-1]))
        p = self.params["dense1"]
        x = L.dense(x, p.kernel, p.bias)
        x = L.relu(L.batchnorm(x, p, train, self.bn_momentum))
        _record(trace, "dense1", x)
        p = self.params["dense2"]
        z = L.dense(x, p.kernel, p.bias)
        _record(trace, "dense2", z)
        if logits:
            return z
        out = L.softmax(z)
        _record(trace, "output", out)
        return out


class Segmenter(_Network):
    """Quarter-day image → per-pixel [P(no cloud), P(cloud)]."""

    kind = "segmenter"

    def forward(self, x, train: bool = False, rng=None, trace: Optional[dict] = None,
                logits: bool = False) -> Tensor:
        x = self._prepare(x)
        _record(trace, "input", x)
        x, skips = self._encode(x, train, rng, trace, pool_last=False)
        for u, b in zip((1, 2, 3), (3, 2, 1)):
            p = self.params[f"deconv{u}"]
            x = L.deconv2d(x, p.kernel, p.bias, stride=2)
            _record(trace, f"deconv{u}", x)
            x = L.concat_channels(x, skips[b])
            _record(trace, f"concat{u}", x)
            x = self._conv(f"up{u}_conv1", x)
            x = self._conv(f"up{u}_conv2", x)
            _record(trace, f"up{u}_conv2", x)
        p = self.params["boundary_deconv"]
        x = L.deconv2d(x, p.kernel, p.bias, stride=1)
        x = L.relu(L.batchnorm(x, p, train, self.bn_momentum))
        _record(trace, "boundary_deconv", x)
        z = self._conv("head_conv", x, "valid", act=False)
        _record(trace, "head_logits", z)
        if logits:
            return z
        out = L.softmax(z)
        _record(trace, "output", out)
        return out


def _record(trace, name, x):
    if trace is not None:
        trace[name] = x


def build_classifier(cfg: ScaleConfig, seed: int = 0, dtype=np.float32, dropout: float = 0.0) -> Classifier:
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = _encoder_params(cfg, rng, dtype)
    c = cfg.c0 * 8
    params["block5_conv1"] = _conv(rng, 3, 3, c, 2 * c, dtype)
    params["block5_conv2"] = _conv(rng, 3, 3, 2 * c, 2 * c, dtype)
    fh, fw = cfg.flatten_kernel
    params["flatten_conv"] = _conv(rng, fh, fw, 2 * c, FLATTEN_CHANNELS, dtype)
    params["dense1"] = _with_bn(
        LayerParams(kernel=_he_uniform(rng, (FLATTEN_CHANNELS, DENSE_HIDDEN), FLATTEN_CHANNELS, dtype),
                    bias=Tensor(np.zeros(DENSE_HIDDEN, dtype=dtype))),
        DENSE_HIDDEN, dtype,
    )
    params["dense2"] = LayerParams(
        kernel=_he_uniform(rng, (DENSE_HIDDEN, 2), DENSE_HIDDEN, dtype),
        bias=Tensor(np.zeros(2, dtype=dtype)),
    )
    return Classifier(cfg, params, dropout)


def build_segmenter(cfg: ScaleConfig, seed: int = 0, dtype=np.float32, dropout: float = 0.0,
                    cloud_prior: Optional[float] = None) -> Segmenter:
    """``cloud_prior`` sets the head bias to the log-odds of that cloud fraction.

    Cloud pixels are rare, so a zero bias starts far from the trivial
    solution and spends the first few hundred steps only undoing that.
    """
    cfg.validate()
    if cloud_prior is not None and not 0.0 < cloud_prior < 1.0:
        raise ValidationError(f"cloud_prior must lie in (0, 1), got {cloud_prior}")
    rng = np.random.default_rng(seed)
    params = _encoder_params(cfg, rng, dtype)
    c = cfg.c0 * 8
    for u in (1, 2, 3):
        params[f"deconv{u}"] = _deconv(rng, 2, 2, c // 2, c, dtype)
        params[f"up{u}_conv1"] = _conv(rng, 3, 3, c, c // 2, dtype)
        params[f"up{u}_conv2"] = _conv(rng, 3, 3, c // 2, c // 2, dtype)
        c //= 2
    params["boundary_deconv"] = _with_bn(_deconv(rng, cfg.boundary_kernel, 1, c, c, dtype), c, dtype)
    params["head_conv"] = _conv(rng, 1, 1, c, 2, dtype)
    if cloud_prior is not None:
        params["head_conv"].bias.data[1] = np.log(cloud_prior / (1.0 - cloud_prior))
    return Segmenter(cfg, params, dropout)


def transfer_weights(source, target):
    """Copy the shared encoder layers of a classifier into a segmenter.

    Accepts networks or raw parameter dicts and returns the updated segmenter
    parameters (a new dict; decoder entries are the original objects).
    """
    if isinstance(source, _Network) and isinstance(target, _Network):
        if source.cfg != target.cfg:
            raise TransferError(f"scale configs differ: {source.cfg} vs {target.cfg}")
    src = source.params if isinstance(source, _Network) else source
    dst = target.params if isinstance(target, _Network) else target
    out = dict(dst)
    for name in ENCODER_LAYERS:
        if name not in src or name not in dst:
            raise TransferError(f"layer {name} missing from one of the networks")
        s, d = src[name], dst[name]
        if s.kernel.shape != d.kernel.shape or s.bias.shape != d.bias.shape:
            raise TransferError(f"layer {name}: shape {s.kernel.shape} cannot replace {d.kernel.shape}")
        out[name] = LayerParams(kernel=Tensor(s.kernel.data.copy()), bias=Tensor(s.bias.data.copy()))
    if isinstance(target, _Network):
        target.params = out
    return out


def predict_mask(segmenter: Segmenter, image) -> np.ndarray:
    """Binary cloud mask: cloud-channel probability ≥ 0.5, inference mode."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if not np.isfinite(data).all():
        raise ValidationError("predict_mask needs a preprocessed image without NaN/Inf")
    single = data.ndim == 3
    probs = segmenter.predict_proba(data[None] if single else data)
    mask = mask_from_proba(probs)
    return mask[0] if single else mask


def mask_from_proba(probs: np.ndarray) -> np.ndarray:
    return (probs[..., 1] >= 0.5).astype(np.uint8)


def predict_day(segmenter: Segmenter, day) -> np.ndarray:
    """Day-level mask from the four unflipped quarters; overlapping bins are OR-ed."""
    from .preprocessing import preprocess_day

    cfg = segmenter.cfg
    if day.shape != (cfg.h_day, cfg.w_day):
        raise ValidationError(f"day is {day.shape[0]}×{day.shape[1]}, model expects {cfg.h_day}×{cfg.w_day}")
    image = preprocess_day(day).astype(segmenter.params["head_conv"].kernel.dtype)
    quarters = np.stack([image[:, o:o + cfg.wq] for o in cfg.offsets])
    masks = predict_mask(segmenter, quarters)
    out = np.zeros((cfg.h_day, cfg.w_day), dtype=np.uint8)
    for o, m in zip(cfg.offsets, masks):
        out[:, o:o + cfg.wq] |= m
    return out
