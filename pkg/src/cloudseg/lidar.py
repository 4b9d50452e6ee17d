"""Day-long lidar records, a synthetic scene generator, and a slope-based cloud detector.

Grids are indexed ``[height, time]`` with height bin 0 at the surface.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ValidationError

DESK_SHAPE = (67, 344)
FULL_SHAPE = (667, 2880)


@dataclass
class DayRecord:
    backscatter: np.ndarray
    ldr: np.ndarray
    clean_mask: Optional[np.ndarray] = None
    noisy_mask: Optional[np.ndarray] = None
    day_id: str = ""

    def __post_init__(self):
        if self.backscatter.shape != self.ldr.shape:
            raise ValidationError(
                f"backscatter {self.backscatter.shape} and ldr {self.ldr.shape} differ in shape"
            )
        for name in ("clean_mask", "noisy_mask"):
            m = getattr(self, name)
            if m is None:
                continue
            if m.shape != self.backscatter.shape:
                raise ValidationError(f"{name} shape {m.shape} != grid shape {self.backscatter.shape}")
            if not np.isin(m, (0, 1)).all():
                raise ValidationError(f"{name} must contain only 0 and 1")

    @property
    def shape(self) -> tuple:
        return self.backscatter.shape


@dataclass
class Cloud:
    """One cloud, in grid units (bins). ``phase`` is ``"liquid"`` or ``"ice"``."""

    center_height: float
    center_time: float
    height_sigma: float
    time_sigma: float
    intensity: float
    phase: str = "liquid"


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    height: int = DESK_SHAPE[0]
    width: int = DESK_SHAPE[1]
    # random clouds; ignored when ``clouds`` is given
    cloud_count: tuple = (1, 6)
    clear_day_probability: float = 0.2
    center_height_range: tuple = (0.08, 0.85)
    height_sigma_range: tuple = (0.02, 0.06)
    time_sigma_range: tuple = (0.02, 0.12)
    intensity_range: tuple = (4.0, 40.0)
    ice_probability: float = 0.5
    clouds: Optional[Sequence[Cloud]] = None
    liquid_ldr: float = 0.05
    ice_ldr: float = 0.4
    molecular_ldr: float = 0.01
    scale_height: float = 0.35
    aerosol_probability: float = 0.5
    aerosol_top_range: tuple = (0.05, 0.15)
    aerosol_intensity_range: tuple = (0.5, 2.0)
    aerosol_ldr: float = 0.08
    noise_level: float = 0.03
    ldr_noise: float = 0.02
    missing_fraction: float = 0.01
    attenuation: float = 0.0025
    noisy_dilate_radius: int = 2
    noisy_merge_gap: int = 3
    noisy_column_dropout: float = 0.02

    def validate(self) -> None:
        if self.height < 4 or self.width < 4:
            raise ConfigurationError(f"grid {self.height}×{self.width} too small")
        if not self.liquid_ldr < self.ice_ldr:
            raise ConfigurationError("liquid LDR level must be below the ice LDR level")
        lo, hi = self.cloud_count
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"invalid cloud count range {self.cloud_count}")
        for name in ("height_sigma_range", "time_sigma_range", "center_height_range",
                     "intensity_range", "aerosol_top_range"):
            a, b = getattr(self, name)
            if not 0 < a <= b:
                raise ConfigurationError(f"{name} must be positive and ordered, got {(a, b)}")
        if self.height_sigma_range[1] * 2 >= 1 or self.time_sigma_range[1] * 2 >= 1:
            raise ConfigurationError("cloud extent ranges exceed the grid")
        if self.center_height_range[1] >= 1:
            raise ConfigurationError("cloud center range exceeds the grid height")
        for c in self.clouds or ():
            self._validate_cloud(c)

    def _validate_cloud(self, c: Cloud) -> None:
        if c.height_sigma <= 0 or c.time_sigma <= 0 or c.intensity <= 0:
            raise ConfigurationError(f"cloud extents and intensity must be positive: {c}")
        if not (0 <= c.center_height < self.height and 0 <= c.center_time < self.width):
            raise ConfigurationError(f"cloud center outside the {self.height}×{self.width} grid: {c}")
        if 2 * c.height_sigma >= self.height or 2 * c.time_sigma >= self.width:
            raise ConfigurationError(f"cloud extent exceeds the {self.height}×{self.width} grid: {c}")
        if c.phase not in ("liquid", "ice"):
            raise ConfigurationError(f"unknown cloud phase {c.phase!r}")


def _draw_clouds(spec: SyntheticSceneSpec, rng: np.random.Generator) -> list:
    if rng.random() < spec.clear_day_probability:
        return []
    n = int(rng.integers(spec.cloud_count[0], spec.cloud_count[1] + 1))
    clouds = []
    for _ in range(n):
        hs = rng.uniform(*spec.height_sigma_range) * spec.height
        ts = rng.uniform(*spec.time_sigma_range) * spec.width
        clouds.append(Cloud(
            center_height=rng.uniform(*spec.center_height_range) * spec.height,
            center_time=rng.uniform(0, spec.width),
            height_sigma=hs,
            time_sigma=ts,
            intensity=float(np.exp(rng.uniform(*np.log(spec.intensity_range)))),
            phase="ice" if rng.random() < spec.ice_probability else "liquid",
        ))
    return clouds


def generate_day(spec: SyntheticSceneSpec, day_id: str = "") -> DayRecord:
    """Render one synthetic day of backscatter, LDR, clean mask and noisy mask.

    Backscatter is linear (unnormalized, noisy, possibly non-positive) so that
    the preprocessing pipeline has real work to do.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    H, W = spec.height, spec.width
    clouds = list(spec.clouds) if spec.clouds is not None else _draw_clouds(spec, rng)

    h = np.arange(H, dtype=np.float64)[:, None]
    t = np.arange(W, dtype=np.float64)[None, :]
    molecular = np.broadcast_to(np.exp(-h / (spec.scale_height * H)), (H, W))

    cloud_sig = np.zeros((H, W))
    cloud_ldr_sig = np.zeros((H, W))
    clean = np.zeros((H, W), dtype=np.uint8)
    for c in clouds:
        bump = c.intensity * np.exp(
            -0.5 * ((h - c.center_height) / c.height_sigma) ** 2
            - 0.5 * ((t - c.center_time) / c.time_sigma) ** 2
        )
        cloud_sig += bump
        cloud_ldr_sig += bump * (spec.ice_ldr if c.phase == "ice" else spec.liquid_ldr)
        clean |= (bump > 0.5 * c.intensity).astype(np.uint8)

    aerosol = np.zeros((H, W))
    if rng.random() < spec.aerosol_probability:
        top = rng.uniform(*spec.aerosol_top_range) * H
        amp = rng.uniform(*spec.aerosol_intensity_range)
        aerosol = np.broadcast_to(amp / (1.0 + np.exp((h - top) / 1.5)), (H, W)).copy()

    # two-way transmission through the cloud mass below each bin
    depth = np.cumsum(cloud_sig, axis=0) - cloud_sig
    transmission = np.exp(-2.0 * spec.attenuation * depth)

    total = molecular + aerosol + cloud_sig
    noise_scale = spec.noise_level * (0.3 + h / H)
    backscatter = total * transmission + rng.standard_normal((H, W)) * noise_scale
    ldr = (spec.molecular_ldr * molecular + spec.aerosol_ldr * aerosol + cloud_ldr_sig) / total
    ldr = ldr + rng.standard_normal((H, W)) * spec.ldr_noise * (0.3 + h / H)

    if spec.missing_fraction > 0:
        missing = rng.random((H, W)) < spec.missing_fraction
        backscatter[missing] = np.nan
        ldr[missing] = np.nan

    noisy = degrade_mask(clean, spec.noisy_dilate_radius, spec.noisy_merge_gap, rng,
                         column_dropout=spec.noisy_column_dropout)
    return DayRecord(
        backscatter=backscatter.astype(np.float32),
        ldr=ldr.astype(np.float32),
        clean_mask=clean,
        noisy_mask=noisy,
        day_id=day_id,
    )


def day_seed(corpus_seed: int, index: int) -> int:
    """Seed of day ``index``: ``corpus_seed + index``, so days can be generated independently."""
    if index < 0:
        raise ConfigurationError(f"negative day index {index}")
    return corpus_seed + index


def generate_corpus(n_days: int, seed: int, spec: Optional[SyntheticSceneSpec] = None) -> list:
    """``n_days`` independent records with seeds from :func:`day_seed`."""
    base = spec or SyntheticSceneSpec()
    return [generate_day(replace(base, seed=day_seed(seed, i)), day_id=f"day{i:04d}") for i in range(n_days)]


def _fill_column_gaps(mask: np.ndarray, max_gap: int) -> np.ndarray:
    out = mask.copy()
    H, W = mask.shape
    for j in range(W):
        rows = np.flatnonzero(mask[:, j])
        if rows.size < 2:
            continue
        gaps = np.diff(rows) - 1
        for k in np.flatnonzero((gaps > 0) & (gaps <= max_gap)):
            out[rows[k] + 1:rows[k + 1], j] = 1
    return out


def degrade_mask(clean: np.ndarray, dilate_radius: int, merge_gap: int,
                 rng: Optional[np.random.Generator] = None, column_dropout: float = 0.0) -> np.ndarray:
    """Turn a clean mask into an oversized, boundary-merging noisy mask.

    Square dilation by ``dilate_radius``, then vertical gaps of at most
    ``merge_gap`` bins between cloud runs of a column are filled. With
    ``column_dropout > 0`` that fraction of time columns is blanked.
    """
    if dilate_radius < 0 or merge_gap < 0:
        raise ConfigurationError("dilate_radius and merge_gap must be non-negative")
    if not 0.0 <= column_dropout < 1.0:
        raise ConfigurationError(f"column_dropout must be in [0, 1), got {column_dropout}")
    out = np.asarray(clean, dtype=np.uint8)
    if dilate_radius > 0:
        out = ndimage.maximum_filter(out, size=2 * dilate_radius + 1, mode="constant", cval=0)
    if merge_gap > 0:
        out = _fill_column_gaps(out, merge_gap)
    else:
        out = out.copy()
    if column_dropout > 0:
        if rng is None:
            raise ConfigurationError("column dropout needs a seeded generator")
        out[:, rng.random(out.shape[1]) < column_dropout] = 0
    return out.astype(np.uint8)


@dataclass
class BaselineParams:
    slope_threshold: float = 0.2
    extinction_ratio_threshold: float = 0.5
    return_fraction: float = 0.7
    min_thickness: int = 3
    min_base: int = 2
    pre_bins: int = 3


def slope_baseline(day, slope_threshold: float = BaselineParams.slope_threshold,
                   extinction_ratio_threshold: float = BaselineParams.extinction_ratio_threshold,
                   return_fraction: float = BaselineParams.return_fraction,
                   min_thickness: int = BaselineParams.min_thickness,
                   min_base: int = BaselineParams.min_base,
                   pre_bins: int = BaselineParams.pre_bins) -> np.ndarray:
    """Column-wise slope detector on preprocessed (log, filled) backscatter.

    ``day`` is a :class:`DayRecord` holding preprocessed backscatter, or the
    grid itself. Each column is smoothed with a 3-bin vertical median. A cloud
    base is a bin at or above ``min_base`` where the upward first difference
    exceeds ``slope_threshold``; ``pre`` is the median of the ``pre_bins``
    bins below it. The layer grows upward while the signal stays above
    ``pre + return_fraction·(peak - pre)`` (``peak`` is the running maximum).
    Layers thinner than ``min_thickness`` bins, or whose mean excess over
    ``pre`` is below ``extinction_ratio_threshold``, are rejected.

    Every rule compares differences, so adding a constant to the grid does
    not change the result.
    """
    grid = day.backscatter if isinstance(day, DayRecord) else np.asarray(day)
    if not np.isfinite(grid).all():
        raise ValidationError("slope_baseline needs preprocessed backscatter without NaN/Inf")
    smooth = ndimage.median_filter(grid.astype(np.float64), size=(3, 1), mode="nearest")
    H, W = smooth.shape
    mask = np.zeros((H, W), dtype=np.uint8)
    rising = np.diff(smooth, axis=0) > slope_threshold
    for j in range(W):
        col = smooth[:, j]
        resume = min_base
        for base in np.flatnonzero(rising[:, j]) + 1:
            if base < resume:
                continue
            pre = np.median(col[max(0, base - pre_bins):base])
            peak = col[base]
            top = base
            while top + 1 < H:
                peak = max(peak, col[top + 1])
                if col[top + 1] < pre + return_fraction * (peak - pre):
                    break
                top += 1
            if top - base + 1 >= min_thickness and (col[base:top + 1] - pre).mean() >= extinction_ratio_threshold:
                mask[base:top + 1, j] = 1
            resume = top + 1
    return mask
