"""Command-line entry point: ``cloudseg <command> [options]``.

Exit codes: 0 success, 1 failed gradient check or unexpected error,
2 bad configuration / input data / shape mismatch, 3 missing prerequisite.
"""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import formats
from .errors import CloudSegError, PrerequisiteError
from .lidar import SyntheticSceneSpec, day_seed, generate_day
from .models import build_segmenter, load_state, predict_day
from .preprocessing import DESK_COUNTS, ScaleConfig, SplitSpec, assemble_datasets, scale_config
from .render import backscatter_panel, encode_ppm, ldr_panel, mask_panel
from .training import ABLATIONS, DESK_EPOCHS, PAPER_EPOCHS, STAGES, EvalReport, HyperGrid, Pipeline

log = logging.getLogger("cloudseg")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_PREREQ = 0, 1, 2, 3
STAGE_KEYS = ("epochs", "lr", "dropout", "decay")
GENERAL_KEYS = {"scale", "seed", "days", "grid", "workers", "split.counts"}
GENERATOR_FIELDS = {f.name: f.type for f in dataclasses.fields(SyntheticSceneSpec)
                    if f.name not in ("seed", "height", "width", "clouds") and f.type in ("int", "float")}


class ConfigError(CloudSegError, ValueError):
    pass


# configuration ------------------------------------------------------------

def load_config(path) -> dict:
    """Flat ``key = value`` file: general keys, ``stageN.<key>`` and ``gen.<field>``."""
    if path is None:
        return {}
    try:
        cfg = formats.parse_kv(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for key in cfg:
        if key in GENERAL_KEYS:
            continue
        head, _, tail = key.partition(".")
        if head in ("stage1", "stage2", "stage3") and tail in STAGE_KEYS:
            continue
        if head == "gen" and tail in GENERATOR_FIELDS:
            continue
        raise ConfigError(f"{path}: unknown config key {key!r}")
    return cfg


def _number_list(cfg, key, cast=float):
    try:
        return [cast(v) for v in cfg[key].replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {cfg[key]!r}") from None


def _int(cfg, key, default):
    if key not in cfg:
        return default
    values = _number_list(cfg, key, int)
    if len(values) != 1:
        raise ConfigError(f"config key {key!r} takes one integer")
    return values[0]


def grid_from_config(cfg: dict) -> HyperGrid:
    kind = cfg.get("grid", "desk")
    if kind not in ("desk", "single"):
        raise ConfigError(f"grid must be 'desk' or 'single', got {kind!r}")
    base = HyperGrid.desk_default() if kind == "desk" else HyperGrid.single()
    points = {}
    for n, stage in enumerate(STAGES, 1):
        lrs, drops, decays = (sorted({p[i] for p in base.points[stage]}, reverse=(i == 0)) for i in range(3))
        lrs = _number_list(cfg, f"stage{n}.lr") if f"stage{n}.lr" in cfg else lrs
        drops = _number_list(cfg, f"stage{n}.dropout") if f"stage{n}.dropout" in cfg else drops
        decays = _number_list(cfg, f"stage{n}.decay") if f"stage{n}.decay" in cfg else decays
        if any(not 0 <= d < 1 for d in drops) or any(lr < 0 for lr in lrs) or any(d < 0 for d in decays):
            raise ConfigError(f"stage{n}: learning rates/decays must be ≥ 0 and dropout in [0, 1)")
        points[stage] = list(itertools.product(lrs, drops, decays))
    return HyperGrid(points)


def epochs_from_config(cfg: dict, scale: str) -> dict:
    defaults = PAPER_EPOCHS if scale == "full" else DESK_EPOCHS
    out = {}
    for n, stage in enumerate(STAGES, 1):
        out[stage] = _int(cfg, f"stage{n}.epochs", defaults[stage])
        if out[stage] < 1:
            raise ConfigError(f"stage{n}.epochs must be positive")
    return out


def scene_spec(cfg: dict, scale: ScaleConfig) -> SyntheticSceneSpec:
    overrides = {}
    for key, value in cfg.items():
        if key.startswith("gen."):
            name = key[4:]
            try:
                overrides[name] = int(value) if GENERATOR_FIELDS[name] == "int" else float(value)
            except ValueError:
                raise ConfigError(f"config key {key!r}: cannot parse {value!r}") from None
    spec = dataclasses.replace(SyntheticSceneSpec(height=scale.h_day, width=scale.w_day), **overrides)
    spec.validate()
    return spec


def _merged(args) -> dict:
    cfg = load_config(getattr(args, "config", None))
    for key in ("scale", "seed", "days"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = str(value)
    if getattr(args, "grid", None):
        cfg["grid"] = args.grid
    return cfg


def _scale(cfg) -> ScaleConfig:
    return scale_config(cfg.get("scale", "desk"))


# corpus helpers -------------------------------------------------------------

def load_corpus(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise PrerequisiteError(f"corpus directory {directory} does not exist")
    return [formats.read_record(p) for p in sorted(directory.glob("*.mplb"))]


def _split(cfg, n_days) -> SplitSpec:
    counts = _number_list(cfg, "split.counts", int) if "split.counts" in cfg else DESK_COUNTS
    if len(counts) != 4:
        raise ConfigError("split.counts takes four integers (classification, noisy, hand_labeled, holdout)")
    return SplitSpec.scaled(n_days, counts, _int(cfg, "seed", 0))


def _bundle(args, cfg):
    scale = _scale(cfg)
    corpus = load_corpus(args.corpus)
    if not corpus:
        raise PrerequisiteError(f"no .mplb day records in {args.corpus}")
    return scale, assemble_datasets(corpus, scale, _split(cfg, len(corpus)))


# commands -------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _merged(args)
    scale = _scale(cfg)
    n_days, seed = _int(cfg, "days", 80), _int(cfg, "seed", 0)
    if n_days < 0:
        raise ConfigError("--days must be non-negative")
    spec = scene_spec(cfg, scale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"scale": scale.name, "days": n_days, "seed": seed, "h_day": scale.h_day, "w_day": scale.w_day}
    clean = noisy = total = 0
    day_lines = {}
    for i in range(n_days):
        s = day_seed(seed, i)
        day = generate_day(dataclasses.replace(spec, seed=s), day_id=f"day{i:04d}")
        formats.write_record(day, out / f"{day.day_id}.mplb")
        clean += int(day.clean_mask.sum())
        noisy += int(day.noisy_mask.sum())
        total += day.clean_mask.size
        day_lines[f"seed.{day.day_id}"] = s
    manifest["cloud_fraction_clean"] = repr(clean / total) if total else "0.0"
    manifest["cloud_fraction_noisy"] = repr(noisy / total) if total else "0.0"
    manifest.update(day_lines)
    formats.atomic_write_text(out / "manifest.txt", formats.format_kv(manifest))
    print(f"wrote {n_days} days to {out} (clean cloud fraction {manifest['cloud_fraction_clean']})")
    return EXIT_OK


def cmd_assemble(args) -> int:
    cfg = _merged(args)
    _, bundle = _bundle(args, cfg)
    formats.atomic_write_text(args.out, "\n".join(bundle.manifest_lines()) + "\n")
    names = ("classification", "noisy", "hand_labeled", "holdout")
    print(",".join(f"{n}={k}" for n, k in zip(names, bundle.sizes())))
    return EXIT_OK


def _sidecar(kind, stage, outcome, scale, seed, extra=None) -> dict:
    d = {"kind": kind, "stage": stage, "seed": seed}
    if outcome.hyperparams:
        d.update(zip(("lr", "dropout", "decay"), (repr(v) for v in outcome.hyperparams)))
    if outcome.result is not None:
        d["best_epoch"] = outcome.result.best_epoch
        d["best_score"] = repr(outcome.result.best_score)
    d.update({f"scale.{k}": v for k, v in scale.as_dict().items()})
    d.update(extra or {})
    return d


def _save_stage(run: Path, folder: str, kind: str, outcome, scale, seed, extra=None) -> None:
    d = run / folder
    d.mkdir(parents=True, exist_ok=True)
    name = "classifier.mplw" if kind == "classifier" else "segmenter.mplw"
    formats.write_checkpoint(outcome.state, d / name, _sidecar(kind, outcome.stage, outcome, scale, seed, extra))
    if outcome.result is not None:
        formats.atomic_write_text(d / "history.txt", outcome.result.history_text())


def _load_stage(run: Path, folder: str, kind: str, scale: ScaleConfig):
    path = run / folder / ("classifier.mplw" if kind == "classifier" else "segmenter.mplw")
    if not path.exists():
        raise PrerequisiteError(f"{path} is missing; run the earlier stage first")
    meta = formats.parse_kv(formats.sidecar_path(path).read_text())
    ck_scale = ScaleConfig.from_dict({k[6:]: v for k, v in meta.items() if k.startswith("scale.")})
    if ck_scale != scale:
        raise ConfigError(f"{path} was trained at scale {ck_scale.name}, data is {scale.name}")
    hyper = tuple(float(meta[k]) for k in ("lr", "dropout", "decay") if k in meta)
    return formats.read_checkpoint(path), hyper


def cmd_train(args) -> int:
    cfg = _merged(args)
    scale, bundle = _bundle(args, cfg)
    seed = _int(cfg, "seed", 0)
    workers = _int(cfg, "workers", None) if "workers" in cfg else None
    pipe = Pipeline(bundle, scale, grid_from_config(cfg), seed, epochs_from_config(cfg, scale.name), workers)
    run = Path(args.out)
    ablations = ABLATIONS if args.ablation == "all" else (args.ablation,)
    stage = args.stage
    prior = {"cloud_prior": repr(pipe.cloud_prior)}

    if stage == "cls_pretrain" and ablations == ("no_pretrain",):
        raise ConfigError("the no_pretrain ablation has no pretraining stage")
    if stage == "noisy_pretrain" and "full" not in ablations:
        raise ConfigError("noisy pretraining only belongs to the full pipeline")
    # a single later stage continues from checkpoints already in the run directory
    if stage == "noisy_pretrain" or (stage == "finetune" and "no_noisy" in ablations):
        pipe.preload("stage1", *_load_stage(run, "stage1", "classifier", scale))
    if stage == "finetune" and "full" in ablations:
        pipe.preload("stage2", *_load_stage(run, "stage2", "segmenter", scale))

    run.mkdir(parents=True, exist_ok=True)
    formats.atomic_write_text(run / "datasets.csv", "\n".join(bundle.manifest_lines()) + "\n")

    if stage == "cls_pretrain":
        _save_stage(run, "stage1", "classifier", pipe.stage1(), scale, seed)
        return EXIT_OK
    if stage == "noisy_pretrain":
        _save_stage(run, "stage2", "segmenter", pipe.stage2(), scale, seed, prior)
        return EXIT_OK

    for ablation in ablations:
        t0 = time.time()
        outcome = pipe.stage3(ablation)
        _save_stage(run, ablation, "segmenter", outcome, scale, seed, prior)
        for split, report in pipe.model_reports(ablation).items():
            formats.atomic_write_text(run / ablation / f"report_{split}.txt", report.to_text())
        log.info("%s finished in %.0f s", ablation, time.time() - t0)
    for key, kind in (("stage1", "classifier"), ("stage2", "segmenter")):
        outcome = pipe.cached(key)
        if outcome is not None and outcome.result is not None:
            _save_stage(run, key, kind, outcome, scale, seed, None if kind == "classifier" else prior)
    ref = run / "reference"
    ref.mkdir(exist_ok=True)
    for (name, split), report in pipe.reference_reports().items():
        formats.atomic_write_text(ref / f"{name}_{split}.txt", report.to_text())
    for ablation in ablations:
        rep = EvalReport.from_text((run / ablation / "report_holdout.txt").read_text())
        print(f"{ablation}: holdout f1={rep.f1:.4f} precision={rep.precision:.4f} recall={rep.recall:.4f}")
    return EXIT_OK


EVAL_ROWS = ("baseline", "no_pretrain", "no_noisy", "full")


def eval_table(run, split: str = "holdout") -> str:
    run = Path(run)
    lines = ["model,f1,precision,recall"]
    for row in EVAL_ROWS:
        path = run / "reference" / f"baseline_{split}.txt" if row == "baseline" else run / row / f"report_{split}.txt"
        if not path.exists():
            log.warning("no report for %s (%s)", row, path)
            continue
        rep = EvalReport.from_text(path.read_text())
        lines.append(f"{row},{rep.f1:.4f},{rep.precision:.4f},{rep.recall:.4f}")
    if len(lines) == 1:
        raise PrerequisiteError(f"no reports under {run}; run 'train' first")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    table = eval_table(args.run, args.split)
    formats.atomic_write_text(Path(args.run) / f"eval_{args.split}.csv", table)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_predict(args) -> int:
    path = Path(args.checkpoint)
    if not path.exists() or not formats.sidecar_path(path).exists():
        raise PrerequisiteError(f"checkpoint {path} or its sidecar {formats.sidecar_path(path)} is missing")
    meta = formats.parse_kv(formats.sidecar_path(path).read_text())
    if meta.get("kind") != "segmenter":
        raise ConfigError(f"{path} holds a {meta.get('kind')!r}, predict needs a segmenter")
    scale = ScaleConfig.from_dict({k[6:]: v for k, v in meta.items() if k.startswith("scale.")})
    seg = build_segmenter(scale)
    load_state(seg.params, formats.read_checkpoint(path))
    if not Path(args.day).exists():
        raise PrerequisiteError(f"day file {args.day} does not exist")
    mask = predict_day(seg, formats.read_record(args.day))
    formats.write_mask_record(mask, args.out)
    print(f"cloud fraction {mask.mean():.4f} -> {args.out}")
    return EXIT_OK


def _mask_grid(path) -> np.ndarray:
    grids = formats.read_grids(path)
    for kind in ("noisy_mask", "clean_mask"):
        if kind in grids:
            return grids[kind]
    raise ConfigError(f"{path} holds no mask grid")


def cmd_render(args) -> int:
    day = formats.read_record(args.day)
    panels = {"backscatter": backscatter_panel(day.backscatter), "ldr": ldr_panel(day.ldr)}
    if day.clean_mask is not None:
        panels["clean_mask"] = mask_panel(day.clean_mask)
    if day.noisy_mask is not None:
        panels["noisy_mask"] = mask_panel(day.noisy_mask)
    for spec in args.mask or ():
        name, _, path = spec.rpartition("=")
        name = name or Path(path).stem
        if not Path(path).exists():
            raise PrerequisiteError(f"mask file {path} does not exist")
        mask = _mask_grid(path)
        if mask.shape != day.shape:
            raise ConfigError(f"mask {path} is {mask.shape}, day is {day.shape}")
        panels[name] = mask_panel(mask)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, gray in panels.items():
        formats.atomic_write_bytes(out / f"{name}.ppm", encode_ppm(gray))
    print(" ".join(f"{n}.ppm" for n in panels))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import format_table, run_suite

    rows = run_suite(args.seeds, args.tolerance)
    sys.stdout.write(format_table(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_FAIL


# plumbing -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cloudseg", description="Lidar cloud segmentation pipeline.",
                                epilog="Exit codes: 0 ok, 1 failure, 2 bad config/input, 3 missing prerequisite. "
                                       "CLOUDSEG_THREADS caps parallel grid-point workers.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scale=True, seed=True):
        sp.add_argument("--config", help="key = value config file")
        if scale:
            sp.add_argument("--scale", choices=("desk", "full"), help="scale configuration (default desk)")
        if seed:
            sp.add_argument("--seed", type=int, help="seed (default 0)")

    sp = sub.add_parser("gen", help="generate a synthetic corpus of day records")
    common(sp)
    sp.add_argument("--days", type=int, help="number of days (default 80)")
    sp.add_argument("--out", required=True, help="output corpus directory")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("assemble", help="write the dataset assignment of a corpus as CSV")
    common(sp)
    sp.add_argument("--corpus", required=True, help="corpus directory")
    sp.add_argument("--out", required=True, help="output CSV path")
    sp.set_defaults(func=cmd_assemble)

    sp = sub.add_parser("train", help="run the staged training pipeline")
    common(sp)
    sp.add_argument("--corpus", required=True, help="corpus directory")
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--ablation", choices=ABLATIONS + ("all",), default="full")
    sp.add_argument("--stage", choices=("all",) + STAGES, default="all",
                    help="run one stage using earlier checkpoints from the run directory")
    sp.add_argument("--grid", choices=("desk", "single"), help="hyperparameter grid (default desk)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="print the model comparison table as CSV")
    sp.add_argument("--run", required=True, help="run directory written by train")
    sp.add_argument("--split", choices=("holdout", "test"), default="holdout")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="predict a day-level mask")
    sp.add_argument("--checkpoint", required=True, help="segmenter checkpoint (.mplw)")
    sp.add_argument("--day", required=True, help="day record (.mplb or .csv)")
    sp.add_argument("--out", required=True, help="output mask record (.mplb)")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("render", help="write PPM panels for a day and masks")
    sp.add_argument("--day", required=True, help="day record")
    sp.add_argument("--mask", action="append", metavar="[NAME=]PATH", help="mask record, repeatable")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    sp.add_argument("--seeds", type=int, default=20, help="random inputs per layer")
    sp.add_argument("--tolerance", type=float, default=1e-6)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def _record_run(args, status: int, started: str) -> None:
    run = getattr(args, "out", None) if args.command in ("train",) else getattr(args, "run", None)
    if run is None or not Path(run).is_dir():
        return
    path = Path(run) / "run_manifest.txt"
    previous = path.read_text() if path.exists() else ""
    entry = {
        "command": args.command, "config": getattr(args, "config", None), "scale": getattr(args, "scale", None),
        "seed": getattr(args, "seed", None), "out": run, "started": started,
        "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"), "status": status,
    }
    line = " ".join(f"{k}={v}" for k, v in entry.items() if v is not None)
    formats.atomic_write_text(path, previous + line + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    try:
        status = args.func(args)
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_PREREQ
    except (CloudSegError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_CONFIG
    _record_run(args, status, started)
    return status


if __name__ == "__main__":
    sys.exit(main())
