"""Three-stage training, hyperparameter search, and dataset-level metrics."""
from __future__ import annotations

import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import layers as L
from .errors import ConfigurationError, DivergenceError, NumericError
from .lidar import slope_baseline
from .models import (build_classifier, build_segmenter, load_state, mask_from_proba,
                     state_arrays, transfer_weights)
from .preprocessing import DatasetBundle, ScaleConfig
from .tensor import no_grad

log = logging.getLogger(__name__)

STAGES = ("cls_pretrain", "noisy_pretrain", "finetune")
ABLATIONS = ("full", "no_noisy", "no_pretrain")
PAPER_EPOCHS = {"cls_pretrain": 100, "noisy_pretrain": 100, "finetune": 300}
DESK_EPOCHS = {"cls_pretrain": 30, "noisy_pretrain": 30, "finetune": 60}
BATCH_SIZES = {"cls_pretrain": 32, "noisy_pretrain": 10, "finetune": 10}
# best (learning rate, dropout, decay) per stage
BEST_HYPERPARAMS = {
    "cls_pretrain": (0.001, 0.5, 0.0),
    "noisy_pretrain": (0.00059, 0.2, 0.0),
    "finetune": (0.001, 0.0, 0.0),
}
EVAL_BATCH = 20


@dataclass
class TrainConfig:
    stage: str
    epochs: int
    batch_size: int
    lr: float
    dropout: float
    decay: float = 0.0
    seed: int = 0
    split: tuple = (0.70, 0.15, 0.15)
    bn_momentum: float = 0.9

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigurationError(f"split fractions {self.split} do not sum to 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch size must be positive")

    @classmethod
    def default(cls, stage: str, scale: str = "paper", **overrides) -> "TrainConfig":
        """Stage defaults: the paper's epochs (``scale="paper"``) or the desk epochs."""
        lr, dropout, decay = BEST_HYPERPARAMS[stage]
        epochs = (PAPER_EPOCHS if scale == "paper" else DESK_EPOCHS)[stage]
        base = cls(stage, epochs, BATCH_SIZES[stage], lr, dropout, decay)
        return replace(base, **overrides)


@dataclass
class EvalReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    per_sample: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    HEADER = "TP,FP,FN,TN,precision,recall,f1,accuracy"

    def to_line(self) -> str:
        return (f"{self.tp},{self.fp},{self.fn},{self.tn},"
                f"{self.precision!r},{self.recall!r},{self.f1!r},{self.accuracy!r}")

    def to_text(self) -> str:
        return f"{self.HEADER}\n{self.to_line()}\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        tp, fp, fn, tn = (int(v) for v in lines[-1].split(",")[:4])
        return cls(tp, fp, fn, tn)


def confusion(pred: np.ndarray, truth: np.ndarray) -> tuple:
    p = np.asarray(pred).astype(bool)
    t = np.asarray(truth).astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return tp, fp, fn, p.size - tp - fp - fn


def evaluate(pred_masks: Sequence[np.ndarray], truth_masks: Sequence[np.ndarray]) -> EvalReport:
    """Pixel counts aggregated over the whole dataset, then precision/recall/F1/accuracy."""
    if len(pred_masks) != len(truth_masks):
        raise ConfigurationError(f"{len(pred_masks)} predictions for {len(truth_masks)} truths")
    report = EvalReport()
    for pred, truth in zip(pred_masks, truth_masks):
        if np.shape(pred) != np.shape(truth):
            raise ConfigurationError(f"prediction shape {np.shape(pred)} != truth shape {np.shape(truth)}")
        counts = confusion(pred, truth)
        report.per_sample.append(counts)
        report.tp += counts[0]
        report.fp += counts[1]
        report.fn += counts[2]
        report.tn += counts[3]
    return report


@dataclass
class HyperGrid:
    """Candidate (learning rate, dropout, decay) triples per stage."""

    points: dict

    @classmethod
    def desk_default(cls) -> "HyperGrid":
        triples = list(itertools.product((1e-3, 5.9e-4, 1e-4), (0.0, 0.2, 0.5), (0.0,)))
        return cls({stage: list(triples) for stage in STAGES})

    @classmethod
    def single(cls) -> "HyperGrid":
        """Only the best configuration of each stage."""
        return cls({stage: [BEST_HYPERPARAMS[stage]] for stage in STAGES})

    def __post_init__(self):
        for stage, triples in self.points.items():
            if stage not in STAGES or not triples:
                raise ConfigurationError(f"grid needs a non-empty candidate list for stage {stage!r}")


def split_indices(n: int, fractions: Sequence[float], seed: int) -> tuple:
    """Shuffled train/val/test index arrays with sizes ``round(f·n)`` (test takes the rest)."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


@dataclass
class StageData:
    x: np.ndarray
    y: np.ndarray
    masks: Optional[np.ndarray] = None

    def subset(self, idx) -> "StageData":
        return StageData(self.x[idx], self.y[idx], None if self.masks is None else self.masks[idx])

    def __len__(self):
        return len(self.x)

    @classmethod
    def from_samples(cls, samples, pixel: bool) -> "StageData":
        x = np.stack([s.image for s in samples])
        if pixel:
            masks = np.stack([s.mask for s in samples]).astype(np.uint8)
            y = np.stack([1 - masks, masks], axis=-1).astype(x.dtype)
            return cls(x, y, masks)
        y = np.stack([s.label() for s in samples]).astype(x.dtype)
        return cls(x, y)


@dataclass
class TrainResult:
    state: dict
    best_epoch: int
    best_score: float
    history: list

    def history_text(self) -> str:
        return "".join(f"{e},{loss!r},{score!r}\n" for e, loss, score in self.history)


def predict_batches(model, x: np.ndarray) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(x), EVAL_BATCH):
            out.append(model.forward(x[i:i + EVAL_BATCH], train=False).data)
    return np.concatenate(out) if out else np.zeros((0,))


def validation_score(model, data: StageData) -> float:
    """Accuracy for the classifier, pixel F1 for the segmenter."""
    probs = predict_batches(model, data.x)
    if model.kind == "classifier":
        pred = (probs[:, 1] >= 0.5).astype(int)
        return float(np.mean(pred == data.y[:, 1].astype(int)))
    return evaluate(mask_from_proba(probs), data.masks).f1


def best_epoch(history: Sequence[tuple]) -> int:
    """Index of the first epoch with the highest validation score."""
    scores = [h[2] for h in history]
    return int(np.argmax(scores))


def train_stage(model, train: StageData, val: StageData, cfg: TrainConfig) -> TrainResult:
    """Mini-batch Adam on cross-entropy; keeps the snapshot of the best validation epoch.

    The model is left holding the best snapshot. The last short batch of an
    epoch is dropped; a training set smaller than one batch is used whole.
    """
    if len(train) == 0 or len(val) == 0:
        raise ConfigurationError(f"stage {cfg.stage}: empty training or validation split")
    model.dropout = cfg.dropout
    model.bn_momentum = cfg.bn_momentum
    params = model.parameters()
    opt = L.AdamState(lr=cfg.lr, decay=cfg.decay)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    n = len(train)
    bs = min(cfg.batch_size, n)
    n_batches = n // bs

    history, best_state, best_score = [], state_arrays(model.params), -np.inf
    best_state = {k: v.copy() for k, v in best_state.items()}
    best_idx = -1
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        losses = []
        for b in range(n_batches):
            idx = np.sort(order[b * bs:(b + 1) * bs])
            for p in params.values():
                p.grad = None
            try:
                z = model.forward(train.x[idx], train=True, rng=drop_rng, logits=True)
                loss = L.softmax_cross_entropy(z, train.y[idx])
                loss.backward()
                L.adam_step(params, opt, epoch)
            except NumericError as exc:
                raise DivergenceError(f"stage {cfg.stage}: divergence at epoch {epoch}, batch {b}: {exc}") from exc
            losses.append(float(loss.data))
        score = validation_score(model, val)
        history.append((epoch, float(np.mean(losses)), score))
        if score > best_score:
            best_score, best_idx = score, epoch
            best_state = {k: v.copy() for k, v in state_arrays(model.params).items()}
    load_state(model.params, best_state)
    return TrainResult(best_state, best_idx, float(best_score), history)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class _Job:
    kind: str
    cfg: ScaleConfig
    init_state: Optional[dict]
    init_seed: int
    cloud_prior: Optional[float]
    train: StageData
    val: StageData
    train_cfg: TrainConfig
    selection: Optional[StageData] = None


def _run_job(job: _Job):
    with threadpool_limits(limits=1):
        if job.kind == "classifier":
            model = build_classifier(job.cfg, seed=job.init_seed)
        else:
            model = build_segmenter(job.cfg, seed=job.init_seed, cloud_prior=job.cloud_prior)
        if job.init_state is not None:
            load_state(model.params, job.init_state)
        result = train_stage(model, job.train, job.val, job.train_cfg)
        select = result.best_score
        if job.selection is not None:
            select = validation_score(model, job.selection)
        return result, select


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CLOUDSEG_THREADS", "1")))
    except ValueError:
        raise ConfigurationError("CLOUDSEG_THREADS must be an integer") from None


def _run_jobs(jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_job, jobs))


@dataclass
class StageOutcome:
    stage: str
    state: dict
    hyperparams: tuple
    result: Optional[TrainResult]
    grid_scores: list


class Pipeline:
    """Lazily runs and caches the three stages so ablations can share work.

    ``epochs`` maps stage name to epoch count (desk defaults unless given).
    """

    def __init__(self, bundle: DatasetBundle, cfg: ScaleConfig, grid: Optional[HyperGrid] = None,
                 seed: int = 0, epochs: Optional[dict] = None, workers: Optional[int] = None,
                 split: tuple = (0.70, 0.15, 0.15)):
        self.bundle = bundle
        self.cfg = cfg
        self.grid = grid or HyperGrid.desk_default()
        self.seed = seed
        self.epochs = dict(DESK_EPOCHS if epochs is None else epochs)
        self.workers = worker_count() if workers is None else workers
        self.split = split
        self._cache = {}

        self.cls_data = self._split(StageData.from_samples(bundle.classification, pixel=False), 1)
        self.noisy_data = self._split(StageData.from_samples(bundle.noisy, pixel=True), 2)
        self.hand_data = self._split(StageData.from_samples(bundle.hand_labeled, pixel=True), 3)
        self.holdout = StageData.from_samples(bundle.holdout, pixel=True)
        self.hand_test_idx = split_indices(len(bundle.hand_labeled), split, derive_seed(seed, 3))[2]
        # every freshly built segmenter starts from the target task's class balance
        self.cloud_prior = float(np.clip(self.hand_data[0].masks.mean(), 1e-3, 0.5))

    def _split(self, data: StageData, stage_no: int):
        if len(data) == 0:
            raise ConfigurationError(f"stage {stage_no}: empty dataset")
        return tuple(data.subset(i) for i in split_indices(len(data), self.split, derive_seed(self.seed, stage_no)))

    def _train_cfg(self, stage: str, triple: tuple, point: int) -> TrainConfig:
        lr, dropout, decay = triple
        return TrainConfig(stage, self.epochs[stage], BATCH_SIZES[stage], lr, dropout, decay,
                           seed=derive_seed(self.seed, STAGES.index(stage), point), split=self.split)

    def _search(self, stage: str, kind: str, init_state: Optional[dict], init_seed: int,
                data: tuple, selection: Optional[StageData] = None) -> StageOutcome:
        train, val, _ = data
        triples = self.grid.points[stage]
        jobs = [_Job(kind, self.cfg, init_state, init_seed, self.cloud_prior, train, val,
                     self._train_cfg(stage, t, i), selection)
                for i, t in enumerate(triples)]
        results = _run_jobs(jobs, self.workers)
        scores = [s for _, s in results]
        pick = int(np.argmax(scores))
        log.info("%s: grid scores %s -> %s", stage, [round(s, 4) for s in scores], triples[pick])
        return StageOutcome(stage, results[pick][0].state, tuple(triples[pick]), results[pick][0], scores)

    def preload(self, stage: str, state: dict, hyperparams: tuple = ()) -> None:
        """Use an existing checkpoint for ``stage1``, ``stage2`` or ``stage3_<ablation>``."""
        if stage not in ("stage1", "stage2") and stage not in {f"stage3_{a}" for a in ABLATIONS}:
            raise ConfigurationError(f"cannot preload {stage!r}")
        name = {"stage1": STAGES[0], "stage2": STAGES[1]}.get(stage, STAGES[2])
        self._cache[stage] = StageOutcome(name, state, tuple(hyperparams), None, [])

    def has(self, stage: str) -> bool:
        return stage in self._cache

    def cached(self, stage: str) -> Optional[StageOutcome]:
        return self._cache.get(stage)

    def segmenter_seed(self) -> int:
        return derive_seed(self.seed, 100)

    def stage1(self) -> StageOutcome:
        if "stage1" not in self._cache:
            self._cache["stage1"] = self._search(
                "cls_pretrain", "classifier", None, derive_seed(self.seed, 101), self.cls_data)
        return self._cache["stage1"]

    def transferred_state(self) -> dict:
        """Fresh segmenter with the stage-1 encoder copied in."""
        if "transfer" not in self._cache:
            cls = build_classifier(self.cfg, seed=derive_seed(self.seed, 101))
            load_state(cls.params, self.stage1().state)
            seg = build_segmenter(self.cfg, seed=self.segmenter_seed(), cloud_prior=self.cloud_prior)
            transfer_weights(cls, seg)
            self._cache["transfer"] = state_arrays(seg.params)
        return self._cache["transfer"]

    def stage2(self) -> StageOutcome:
        if "stage2" not in self._cache:
            self._cache["stage2"] = self._search(
                "noisy_pretrain", "segmenter", self.transferred_state(), self.segmenter_seed(), self.noisy_data)
        return self._cache["stage2"]

    def stage3(self, ablation: str) -> StageOutcome:
        if ablation not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation {ablation!r}")
        key = f"stage3_{ablation}"
        if key not in self._cache:
            if ablation == "full":
                init = self.stage2().state
            elif ablation == "no_noisy":
                init = self.transferred_state()
            else:
                init = None
            self._cache[key] = self._search(
                "finetune", "segmenter", init, self.segmenter_seed(), self.hand_data, selection=self.holdout)
        return self._cache[key]

    def final_model(self, ablation: str):
        seg = build_segmenter(self.cfg, seed=self.segmenter_seed())
        load_state(seg.params, self.stage3(ablation).state)
        return seg

    def model_reports(self, ablation: str) -> dict:
        seg = self.final_model(ablation)
        test = self.hand_data[2]
        with threadpool_limits(limits=1):
            return {
                "test": evaluate(mask_from_proba(predict_batches(seg, test.x)), test.masks),
                "holdout": evaluate(mask_from_proba(predict_batches(seg, self.holdout.x)), self.holdout.masks),
            }

    def reference_reports(self) -> dict:
        """Slope baseline and noisy masks scored against the clean labels."""
        out = {}
        test_samples = [self.bundle.hand_labeled[i] for i in self.hand_test_idx]
        for split_name, samples in (("test", test_samples), ("holdout", self.bundle.holdout)):
            truths = [s.mask for s in samples]
            out[("baseline", split_name)] = evaluate([self._baseline_window(s) for s in samples], truths)
            out[("noisy", split_name)] = evaluate([self._day_window(s, self.bundle.day_noisy) for s in samples],
                                                  truths)
        return out

    def _window(self, grid: np.ndarray, sample) -> np.ndarray:
        _, q, flipped = sample.source
        o = self.cfg.offsets[q]
        win = grid[:, o:o + self.cfg.wq]
        return win[:, ::-1] if flipped else win

    def _day_window(self, sample, store: dict) -> np.ndarray:
        return self._window(store[sample.source[0]], sample)

    def _baseline_window(self, sample) -> np.ndarray:
        day_id = sample.source[0]
        key = ("baseline", day_id)
        if key not in self._cache:
            self._cache[key] = slope_baseline(self.bundle.day_images[day_id][..., 0])
        return self._window(self._cache[key], sample)


def run_pipeline(bundle: DatasetBundle, grid: HyperGrid, cfg: ScaleConfig, seed: int,
                 ablation: str = "full", **kwargs):
    """Train one ablation end to end. Returns (segmenter, reports, pipeline)."""
    pipe = Pipeline(bundle, cfg, grid, seed, **kwargs)
    reports = pipe.model_reports(ablation)
    return pipe.final_model(ablation), reports, pipe
