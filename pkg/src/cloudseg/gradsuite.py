"""Finite-difference gradient checks for every layer, run in float64."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from .layers import LayerParams
from .tensor import Tensor, grad_check


@dataclass
class SuiteRow:
    layer: str
    runs: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64))


def _distinct(rng, shape):
    # well separated values so a ±eps perturbation never reorders a pool window
    n = int(np.prod(shape))
    return rng.permutation(np.linspace(-1.0, 1.0, n)).reshape(shape)


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(gap, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _one_hot(rng, shape):
    idx = rng.integers(0, 2, shape[:-1])
    return np.stack([1 - idx, idx], axis=-1).astype(np.float64)


def _probs(rng, shape):
    p = rng.uniform(0.05, 0.95, shape[:-1])
    return np.stack([1 - p, p], axis=-1)


def _bn_case(rng):
    p = LayerParams(gamma=_t(rng.uniform(0.5, 1.5, 3)), beta=_t(rng.normal(size=3)),
                    running_mean=np.zeros(3), running_var=np.ones(3))
    x = _t(rng.normal(size=(2, 3, 4, 3)))

    def op(x, gamma, beta):
        p.gamma, p.beta = gamma, beta
        return L.batchnorm(x, p, train=True)
    return op, [x, p.gamma, p.beta]


def _cases() -> dict:
    """Layer name -> factory(rng) returning (op, inputs)."""
    return {
        "conv2d_valid": lambda r: (lambda x, k, b: L.conv2d(x, k, b, "valid"),
                                   [_t(r.normal(size=(2, 5, 6, 2))), _t(r.normal(size=(3, 2, 2, 3))),
                                    _t(r.normal(size=3))]),
        "conv2d_same": lambda r: (lambda x, k, b: L.conv2d(x, k, b, "same"),
                                  [_t(r.normal(size=(2, 5, 6, 2))), _t(r.normal(size=(3, 3, 2, 3))),
                                   _t(r.normal(size=3))]),
        "deconv2d_k×1_s1": lambda r: (lambda x, k, b: L.deconv2d(x, k, b, stride=1),
                                      [_t(r.normal(size=(2, 4, 3, 3))), _t(r.normal(size=(3, 1, 2, 3))),
                                       _t(r.normal(size=2))]),
        "deconv2d_2×2_s2": lambda r: (lambda x, k, b: L.deconv2d(x, k, b, stride=2),
                                      [_t(r.normal(size=(2, 3, 3, 3))), _t(r.normal(size=(2, 2, 2, 3))),
                                       _t(r.normal(size=2))]),
        "maxpool2": lambda r: (L.maxpool2, [_t(_distinct(r, (2, 4, 6, 2)))]),
        "batchnorm_train": _bn_case,
        "dense": lambda r: (L.dense, [_t(r.normal(size=(4, 5))), _t(r.normal(size=(5, 3))),
                                      _t(r.normal(size=3))]),
        "relu": lambda r: (L.relu, [_t(_away_from_zero(r, (2, 3, 4, 2)))]),
        "softmax": lambda r: (L.softmax, [_t(r.normal(size=(2, 3, 4, 2)))]),
        "cross_entropy_image": lambda r: ((lambda t: lambda p: L.cross_entropy(p, t))(_one_hot(r, (6, 2))),
                                          [_t(_probs(r, (6, 2)))]),
        "cross_entropy_pixel": lambda r: ((lambda t: lambda p: L.cross_entropy(p, t))(_one_hot(r, (2, 3, 4, 2))),
                                          [_t(_probs(r, (2, 3, 4, 2)))]),
        "softmax_xent_image": lambda r: ((lambda t: lambda z: L.softmax_cross_entropy(z, t))(_one_hot(r, (6, 2))),
                                         [_t(r.normal(size=(6, 2)))]),
        "softmax_xent_pixel": lambda r: ((lambda t: lambda z: L.softmax_cross_entropy(z, t))(
            _one_hot(r, (2, 3, 4, 2))), [_t(r.normal(size=(2, 3, 4, 2)))]),
        "concat_channels": lambda r: (L.concat_channels, [_t(r.normal(size=(2, 3, 4, 2))),
                                                          _t(r.normal(size=(2, 3, 4, 3)))]),
    }


LAYERS = tuple(_cases())


def run_suite(seeds: int = 20, tolerance: float = 1e-6, layers=None,
              progress: Callable[[SuiteRow], None] = None) -> list:
    """Check each layer on ``seeds`` random inputs; one row per layer with the worst error."""
    cases = _cases()
    rows = []
    for name in layers or LAYERS:
        worst = 0.0
        for s in range(seeds):
            op, inputs = cases[name](np.random.default_rng(s))
            report = grad_check(op, inputs, tolerance=tolerance, seed=s, label=name)
            worst = max(worst, report.max_error)
        row = SuiteRow(name, seeds, worst, tolerance)
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def format_table(rows) -> str:
    lines = [f"{'layer':<22} {'runs':>5} {'max_rel_err':>12}  result"]
    for r in rows:
        lines.append(f"{r.layer:<22} {r.runs:>5} {r.max_error:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
