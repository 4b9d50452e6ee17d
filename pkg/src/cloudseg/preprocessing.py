"""Cleaning, normalization, quarter-day extraction and dataset assembly."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import AssemblyError, ConfigurationError, DegenerateDayError, DimensionError
from .lidar import DayRecord


@dataclass(frozen=True)
class ScaleConfig:
    name: str
    h_day: int
    w_day: int
    margin: int
    wq: int
    offsets: tuple
    c0: int

    @property
    def h0(self) -> int:
        return self.h_day - self.margin

    @property
    def boundary_kernel(self) -> int:
        return self.margin + 1

    @property
    def flatten_kernel(self) -> tuple:
        return (self.h0 // 32, self.wq // 32)

    def validate(self) -> None:
        if self.margin < 0 or self.h0 <= 0:
            raise ConfigurationError(f"margin {self.margin} incompatible with day height {self.h_day}")
        if self.h0 % 32 or self.wq % 32:
            raise ConfigurationError(
                f"H0={self.h0} and Wq={self.wq} must both be divisible by 32 (five 2×2 pools)"
            )
        if len(self.offsets) != 4:
            raise ConfigurationError("exactly four quarter offsets are required")
        if any(o < 0 or o + self.wq > self.w_day for o in self.offsets):
            raise ConfigurationError(f"quarter windows {self.offsets} (width {self.wq}) leave the day")
        if self.c0 < 1:
            raise ConfigurationError("base channel count must be positive")

    def as_dict(self) -> dict:
        return {
            "scale": self.name, "h_day": self.h_day, "w_day": self.w_day, "margin": self.margin,
            "wq": self.wq, "offsets": " ".join(map(str, self.offsets)), "c0": self.c0,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleConfig":
        offsets = d["offsets"]
        if isinstance(offsets, str):
            offsets = tuple(int(v) for v in offsets.replace(",", " ").split())
        cfg = cls(str(d.get("scale", "custom")), int(d["h_day"]), int(d["w_day"]), int(d["margin"]),
                  int(d["wq"]), tuple(offsets), int(d["c0"]))
        cfg.validate()
        return cfg


FULL = ScaleConfig("full", 667, 2880, 27, 800, (0, 680, 1400, 2080), 16)
DESK = ScaleConfig("desk", 67, 344, 3, 96, (0, 81, 166, 248), 4)


def scale_config(name: str) -> ScaleConfig:
    try:
        return {"full": FULL, "desk": DESK}[name]
    except KeyError:
        raise ConfigurationError(f"unknown scale {name!r}; expected 'full' or 'desk'") from None


def preprocess_backscatter(raw: np.ndarray) -> np.ndarray:
    """Log, fill invalid bins with the day's minimum log value, then standardize.

    A constant day (zero variance after filling) maps to all zeros.
    """
    raw = np.asarray(raw, dtype=np.float64)
    valid = np.isfinite(raw) & (raw > 0)
    if not valid.any():
        raise DegenerateDayError("backscatter has no finite positive values")
    out = np.empty_like(raw)
    out[valid] = np.log(raw[valid])
    out[~valid] = out[valid].min()
    out -= out.mean()
    std = out.std()
    if std == 0 or not np.isfinite(std):
        return np.zeros_like(out)
    return out / std


def preprocess_ldr(raw: np.ndarray) -> np.ndarray:
    """Missing values to 0, then clamp to [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    return np.clip(np.where(np.isnan(raw), 0.0, raw), 0.0, 1.0)


def preprocess_day(day: DayRecord) -> np.ndarray:
    """The day's two-channel image: normalized log backscatter and clipped LDR."""
    return np.stack([preprocess_backscatter(day.backscatter), preprocess_ldr(day.ldr)], axis=-1)


@dataclass
class QuarterSample:
    image: np.ndarray
    has_cloud: int
    mask: Optional[np.ndarray] = None
    source: tuple = ("", 0, False)

    def one_hot(self) -> np.ndarray:
        """Pixel labels as ``H×Wq×2`` (channel 0 no-cloud, channel 1 cloud)."""
        if self.mask is None:
            raise AssemblyError(f"sample {self.source} has no pixel mask")
        m = self.mask.astype(self.image.dtype)
        return np.stack([1 - m, m], axis=-1)

    def label(self) -> np.ndarray:
        return np.array([1 - self.has_cloud, self.has_cloud], dtype=self.image.dtype)

    def flipped(self) -> "QuarterSample":
        day_id, q, f = self.source
        return QuarterSample(
            image=self.image[:, ::-1].copy(),
            has_cloud=self.has_cloud,
            mask=None if self.mask is None else self.mask[:, ::-1].copy(),
            source=(day_id, q, not f),
        )


def _check_day(day: DayRecord, cfg: ScaleConfig) -> None:
    if day.shape != (cfg.h_day, cfg.w_day):
        raise DimensionError(f"day {day.day_id!r} has shape {day.shape}, scale expects {(cfg.h_day, cfg.w_day)}")


def _select_mask(day: DayRecord, mask_kind: Optional[str]):
    if mask_kind is None:
        mask_kind = "clean" if day.clean_mask is not None else "noisy"
    if mask_kind not in ("clean", "noisy"):
        raise ConfigurationError(f"unknown mask kind {mask_kind!r}")
    return day.clean_mask if mask_kind == "clean" else day.noisy_mask


def quarter_flags(mask: np.ndarray, cfg: ScaleConfig) -> list:
    return [int(mask[:, o:o + cfg.wq].any()) for o in cfg.offsets]


def quarter_and_flip(day: DayRecord, cfg: ScaleConfig, mask_kind: Optional[str] = None,
                     image: Optional[np.ndarray] = None, dtype=np.float32) -> list:
    """The eight samples of a day: each quarter window followed by its time-reversed copy.

    ``mask_kind`` picks the label source (``"clean"`` or ``"noisy"``); by default
    the clean mask when the day has one. A precomputed day ``image`` may be passed.
    """
    _check_day(day, cfg)
    if image is None:
        image = preprocess_day(day)
    image = image.astype(dtype, copy=False)
    mask = _select_mask(day, mask_kind)
    samples = []
    for q, o in enumerate(cfg.offsets):
        win_mask = None if mask is None else mask[:, o:o + cfg.wq].astype(np.uint8)
        s = QuarterSample(
            image=np.ascontiguousarray(image[:, o:o + cfg.wq]),
            has_cloud=int(win_mask.any()) if win_mask is not None else 0,
            mask=win_mask,
            source=(day.day_id, q, False),
        )
        samples.extend([s, s.flipped()])
    return samples


@dataclass(frozen=True, order=True)
class SampleRef:
    day: int
    quarter: int
    flipped: bool
    has_cloud: int


@dataclass
class DatasetPlan:
    """Rules for one dataset: which days feed it and how many samples to take.

    ``count`` samples are taken from ``days``; when ``cloudy``/``clear`` are
    given the selection is composed of exactly that many cloudy and clear
    samples. ``label`` is the mask used for pixel labels and cloud flags.
    """

    days: tuple
    count: int
    label: str
    cloudy: Optional[int] = None
    clear: Optional[int] = None


DESK_COUNTS = (160, 200, 80, 40)


@dataclass
class SplitSpec:
    classification: DatasetPlan
    noisy: DatasetPlan
    hand_labeled: DatasetPlan
    holdout: DatasetPlan
    seed: int = 0

    def plans(self) -> dict:
        return {
            "classification": self.classification, "noisy": self.noisy,
            "hand_labeled": self.hand_labeled, "holdout": self.holdout,
        }

    @classmethod
    def desk_default(cls, n_days: int = 80, seed: int = 0) -> "SplitSpec":
        """Counts (160, 200, 80, 40) over day ranges scaled to ``n_days`` (80 by default)."""
        if n_days < 80:
            raise AssemblyError(f"desk defaults need at least 80 days, got {n_days}")
        return cls.scaled(n_days, DESK_COUNTS, seed)

    @classmethod
    def scaled(cls, n_days: int, counts: Sequence[int] = None, seed: int = 0) -> "SplitSpec":
        """Same day layout as the desk default for any corpus length.

        Days are split 25:40:10:5 (noisy, classification, hand-labeled,
        holdout) in that order along the corpus.
        """
        counts = tuple(counts or DESK_COUNTS)
        if len(counts) != 4 or min(counts) < 0 or counts[0] % 2:
            raise AssemblyError(f"need four non-negative counts with an even classification count, got {counts}")
        n_noisy = n_days * 25 // 80
        n_hand = n_days * 10 // 80
        n_hold = n_days * 5 // 80
        if min(n_noisy, n_hand, n_hold, n_days - n_noisy - n_hand - n_hold) < 1:
            raise AssemblyError(f"{n_days} days are too few to give every dataset its own days")
        hand_start = n_days - n_hand - n_hold
        return cls(
            classification=DatasetPlan(tuple(range(n_noisy, hand_start)), counts[0], "noisy",
                                       cloudy=counts[0] // 2, clear=counts[0] // 2),
            noisy=DatasetPlan(tuple(range(n_noisy)), counts[1], "noisy"),
            hand_labeled=DatasetPlan(tuple(range(hand_start, n_days - n_hold)), counts[2], "clean"),
            holdout=DatasetPlan(tuple(range(n_days - n_hold, n_days)), counts[3], "clean"),
            seed=seed,
        )


def plan_datasets(flags: Sequence[dict], split: SplitSpec) -> dict:
    """Choose samples for the four datasets from per-day quarter cloud flags.

    ``flags[d]`` maps a label kind (``"clean"``/``"noisy"``) to the four
    quarter flags of day ``d``. Returns dataset name -> list of
    :class:`SampleRef`. Both flips of a quarter are always taken together.
    """
    plans = split.plans()
    owner = {}
    for name, plan in plans.items():
        for d in plan.days:
            if not 0 <= d < len(flags):
                raise AssemblyError(f"{name} requests day {d} but the corpus has {len(flags)} days")
            if d in owner:
                raise AssemblyError(f"day {d} assigned to both {owner[d]} and {name}")
            owner[d] = name
    if set(plans["noisy"].days) & set(plans["hand_labeled"].days):
        raise AssemblyError("noisy dataset shares days with the hand-labeled training days")

    rng = np.random.default_rng(split.seed)
    out = {}
    for name, plan in plans.items():
        quarters = [(d, q, flags[d][plan.label][q]) for d in plan.days for q in range(4)]
        if plan.cloudy is None:
            chosen = _take(quarters, plan.count, name, "samples")
        else:
            if plan.cloudy + plan.clear != plan.count:
                raise AssemblyError(f"{name}: cloudy + clear != count")
            order = rng.permutation(len(quarters))
            shuffled = [quarters[i] for i in order]
            cloudy = _take([x for x in shuffled if x[2]], plan.cloudy, name, "cloudy samples")
            clear = _take([x for x in shuffled if not x[2]], plan.clear, name, "cloud-free samples")
            chosen = sorted(cloudy + clear)
        out[name] = chosen
    return out


def _take(quarters: list, count: int, name: str, what: str) -> list:
    refs = [SampleRef(d, q, f, int(c)) for d, q, c in quarters for f in (False, True)]
    if len(refs) < count:
        raise AssemblyError(f"{name}: need {count} {what}, only {len(refs)} available "
                            f"(shortfall {count - len(refs)})")
    return refs[:count]


@dataclass
class DatasetBundle:
    classification: list = field(default_factory=list)
    noisy: list = field(default_factory=list)
    hand_labeled: list = field(default_factory=list)
    holdout: list = field(default_factory=list)
    # the day-level inputs of the holdout/hand-labeled sets, kept for the baseline
    day_images: dict = field(default_factory=dict)
    day_noisy: dict = field(default_factory=dict)

    def collections(self) -> dict:
        return {
            "classification": self.classification, "noisy": self.noisy,
            "hand_labeled": self.hand_labeled, "holdout": self.holdout,
        }

    def sizes(self) -> tuple:
        return tuple(len(v) for v in self.collections().values())

    def manifest_lines(self) -> list:
        """``day_id,quarter,flipped,dataset,has_cloud`` per sample."""
        lines = []
        for name, samples in self.collections().items():
            for s in samples:
                day_id, q, f = s.source
                lines.append(f"{day_id},{q},{int(f)},{name},{s.has_cloud}")
        return lines

    def check_disjoint(self) -> None:
        seen = {}
        for name, samples in self.collections().items():
            for s in samples:
                key = s.source[:2]
                if key in seen and seen[key] != name:
                    raise AssemblyError(f"quarter {key} appears in both {seen[key]} and {name}")
                seen[key] = name


def assemble_datasets(corpus: Sequence[DayRecord], cfg: ScaleConfig, split: SplitSpec,
                      dtype=np.float32) -> DatasetBundle:
    for day in corpus:
        _check_day(day, cfg)
    flags = []
    for day in corpus:
        entry = {}
        if day.clean_mask is not None:
            entry["clean"] = quarter_flags(day.clean_mask, cfg)
        if day.noisy_mask is not None:
            entry["noisy"] = quarter_flags(day.noisy_mask, cfg)
        flags.append(entry)
    for name, plan in split.plans().items():
        for d in plan.days:
            if d < len(corpus) and plan.label not in flags[d]:
                raise AssemblyError(f"{name} needs {plan.label} masks but day {d} has none")
    chosen = plan_datasets(flags, split)

    images, cache = {}, {}
    bundle = DatasetBundle()
    for name, refs in chosen.items():
        label = split.plans()[name].label
        samples = []
        for ref in refs:
            if (ref.day, label) not in cache:
                if ref.day not in images:
                    images[ref.day] = preprocess_day(corpus[ref.day]).astype(dtype)
                cache[(ref.day, label)] = quarter_and_flip(corpus[ref.day], cfg, label, images[ref.day], dtype)
            samples.append(cache[(ref.day, label)][2 * ref.quarter + int(ref.flipped)])
        setattr(bundle, name, samples)
        if name in ("hand_labeled", "holdout"):
            for ref in refs:
                day = corpus[ref.day]
                bundle.day_images[day.day_id] = images[ref.day]
                if day.noisy_mask is not None:
                    bundle.day_noisy[day.day_id] = day.noisy_mask
    bundle.check_disjoint()
    return bundle
