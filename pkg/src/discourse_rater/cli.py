"""Command-line interface.

Subcommands: ``synth`` (generate a synthetic dataset), ``train`` (single
training run), ``cv`` (nested cross-validation), ``ablate`` (variant
comparison on one fold plan), ``correlate`` (classroom-level score vs student
outcomes), and ``gradcheck`` (finite-difference audit of every operation).

Every command resolves its settings from built-in defaults, then an optional
JSON config file, then explicit flags, and writes the resolved configuration
next to its outputs so any run can be reproduced from its artifacts.  Exit
codes: 0 success, 1 computation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .checks import run_gradient_checks
from .data import (Dataset, DatasetManifest, SynthConfig, generate_synthetic,
                   uniform_signal)
from .errors import DiscourseRaterError, UsageError
from .harness import (GridPoint, default_grid, run_ablation, run_nested_cv)
from .metrics import (classroom_aggregate, pearson_r, significance_stars)
from .model import ModelConfig, build_model, save_model
from .objective import COMPONENT_TITLES, COMPONENTS
from .train import TrainConfig, component_weights, train

OUTCOMES = ("test_score", "interest", "self_efficacy")
OUTCOME_TITLES = {"test_score": "Test scores", "interest": "Interest",
                  "self_efficacy": "Self-efficacy"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DiscourseRaterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="discourse-rater",
        description="Multimodal ordinal rating of classroom discourse segments.")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--config", type=Path)
    synth.add_argument("--out", type=Path)
    synth.add_argument("--teachers", type=int)
    synth.add_argument("--segments-per-teacher", type=int)
    synth.add_argument("--lessons-per-teacher", type=int)
    synth.add_argument("--text-len", type=int, nargs=2, metavar=("MIN", "MAX"))
    synth.add_argument("--chunk-len", type=int, nargs=2, metavar=("MIN", "MAX"))
    synth.add_argument("--signal-strength", type=float,
                       help="uniform planted-signal strength in [0, 1]")
    synth.add_argument("--signal", action="append", default=None,
                       metavar="MODALITY.COMPONENT=VALUE",
                       help="per-pair override, e.g. audio.nature=0.9 (repeatable)")
    synth.add_argument("--rho", type=float, help="label correlation in [0, 1]")
    synth.add_argument("--noise-sd", type=float)
    synth.add_argument("--rater-noise-sd", type=float)
    synth.add_argument("--students-per-teacher", type=int)
    synth.add_argument("--outcome-noise-sd", type=float)
    synth.add_argument("--seed", type=int)
    synth.set_defaults(handler=cmd_synth)

    for name, handler in (("train", cmd_train), ("cv", cmd_cv), ("ablate", cmd_ablate)):
        cmd = sub.add_parser(name, help=f"run {name}")
        cmd.add_argument("--config", type=Path)
        cmd.add_argument("--data", type=Path, help="dataset root directory")
        cmd.add_argument("--out", type=Path)
        cmd.add_argument("--modalities", help="e.g. T, T+A, T+A+V")
        cmd.add_argument("--encoder", choices=["attention", "lstm"])
        cmd.add_argument("--m", type=int, dest="fusion_modules",
                         help="number of fusion modules")
        cmd.add_argument("--task", choices=["multi", "single"])
        cmd.add_argument("--component", choices=list(COMPONENTS))
        cmd.add_argument("--loss", choices=["oll", "ce", "l1"])
        cmd.add_argument("--no-positional", action="store_true", default=None)
        cmd.add_argument("--dropout", type=float)
        cmd.add_argument("--lr", type=float)
        cmd.add_argument("--batch-size", type=int)
        cmd.add_argument("--max-epochs", type=int)
        cmd.add_argument("--val-fraction", type=float)
        cmd.add_argument("--seed", type=int)
        if name in ("cv", "ablate"):
            cmd.add_argument("--grid-lr", type=float, nargs="+")
            cmd.add_argument("--grid-batch", type=int, nargs="+")
            cmd.add_argument("--grid-m", type=int, nargs="+")
            cmd.add_argument("--jobs", type=int)
        if name == "ablate":
            cmd.add_argument("--axes", nargs="+",
                             choices=["modality", "encoder", "task", "loss"])
        cmd.set_defaults(handler=handler)

    corr = sub.add_parser("correlate",
                          help="correlate classroom-level scores with student outcomes")
    corr.add_argument("--config", type=Path)
    corr.add_argument("--data", type=Path)
    corr.add_argument("--predictions", type=Path, help="prediction table from cv")
    corr.add_argument("--out", type=Path)
    corr.set_defaults(handler=cmd_correlate)

    grad = sub.add_parser("gradcheck", help="finite-difference audit of all operations")
    grad.add_argument("--tol", type=float, default=1e-5)
    grad.add_argument("--seed", type=int, default=0)
    grad.set_defaults(handler=cmd_gradcheck)
    return parser


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def _resolve(args, file_cfg: dict, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    for key in defaults:
        if key in file_cfg:
            resolved[key] = file_cfg[key]
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _write_resolved(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(resolved, indent=2, sort_keys=True)
    (out_dir / "run_config.json").write_text(text + "\n", encoding="utf-8")


def _require(resolved: dict, key: str, command: str):
    if resolved.get(key) is None:
        raise UsageError(f"{command} needs --{key.replace('_', '-')}")
    return resolved[key]


# -- synth ---------------------------------------------------------------------


def _parse_signal_overrides(entries, strength: float) -> dict:
    signal = uniform_signal(strength)
    for entry in entries or ():
        try:
            target, value = entry.split("=")
            modality, component = target.split(".")
            signal[modality][component] = float(value)
        except (ValueError, KeyError) as exc:
            raise UsageError(f"bad --signal entry {entry!r}; "
                             f"expected MODALITY.COMPONENT=VALUE") from exc
    return signal


def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config)
    defaults = {
        "out": None, "teachers": 10, "segments_per_teacher": 4,
        "lessons_per_teacher": 2, "text_len": [5, 9], "chunk_len": [6, 10],
        "signal_strength": 0.8, "signal": None, "rho": 0.3, "noise_sd": 0.1,
        "rater_noise_sd": 0.4, "students_per_teacher": 0,
        "outcome_noise_sd": 0.1, "seed": 0,
    }
    resolved = _resolve(args, file_cfg, defaults)
    out_dir = Path(_require(resolved, "out", "synth"))
    resolved["out"] = str(out_dir)

    cfg = SynthConfig(
        n_teachers=resolved["teachers"],
        segments_per_teacher=resolved["segments_per_teacher"],
        lessons_per_teacher=resolved["lessons_per_teacher"],
        text_len=tuple(resolved["text_len"]),
        chunk_len=tuple(resolved["chunk_len"]),
        signal_strength=_parse_signal_overrides(resolved["signal"],
                                                resolved["signal_strength"]),
        label_correlation=resolved["rho"],
        noise_sd=resolved["noise_sd"],
        rater_noise_sd=resolved["rater_noise_sd"],
        students_per_teacher=resolved["students_per_teacher"],
        outcome_noise_sd=resolved["outcome_noise_sd"],
        seed=resolved["seed"],
    )
    dataset = generate_synthetic(cfg, out_dir)
    _write_resolved(out_dir, resolved)

    manifest = dataset.manifest
    print(f"teachers: {len(manifest.teacher_ids())}")
    print(f"segments: {len(manifest.segments)}")
    print(f"students: {len(manifest.student_records)}")
    from .objective import RATINGS

    for component in COMPONENTS:
        counts = {r: 0 for r in RATINGS}
        for seg in manifest.segments:
            counts[seg.labels[component]] += 1
        row = "  ".join(f"{rating:.1f}:{counts[rating]}" for rating in RATINGS)
        print(f"label histogram [{component}]: {row}")
    return 0


# -- shared model/train plumbing --------------------------------------------------


_MODEL_DEFAULTS = {
    "modalities": "T", "encoder": "attention", "fusion_modules": 1,
    "task": "multi", "component": None, "loss": "oll",
    "no_positional": False, "dropout": 0.1,
}
_TRAIN_DEFAULTS = {"lr": 1e-4, "batch_size": 8, "max_epochs": 200,
                   "val_fraction": 0.2, "seed": 0}


def _model_config(resolved: dict) -> ModelConfig:
    return ModelConfig(
        modalities=resolved["modalities"],
        encoder=resolved["encoder"],
        fusion_modules=resolved["fusion_modules"],
        task=resolved["task"],
        component=resolved["component"],
        loss=resolved["loss"],
        positional=not resolved["no_positional"],
        dropout=resolved["dropout"],
        seed=resolved["seed"],
    )


def _train_config(resolved: dict) -> TrainConfig:
    return TrainConfig(lr=resolved["lr"], batch_size=resolved["batch_size"],
                       max_epochs=resolved["max_epochs"],
                       val_fraction=resolved["val_fraction"],
                       seed=resolved["seed"])


def _grid(resolved: dict) -> list[GridPoint]:
    lrs = resolved.get("grid_lr") or [1e-4, 1e-5]
    batches = resolved.get("grid_batch") or [8, 16, 32]
    ms = resolved.get("grid_m") or [1, 2, 3, 4, 5]
    return [GridPoint(lr=lr, batch_size=b, fusion_modules=m)
            for lr in lrs for b in batches for m in ms]


def _report_text(report) -> str:
    lines = [f"{'Component':<22s}  {'per-fold QWK':<40s}  {'mean (SE)':>12s}"]
    for component in report.components:
        summary = report.components[component]
        folds = " ".join(f"{v:+.3f}" for v in summary.per_fold)
        lines.append(f"{COMPONENT_TITLES.get(component, component):<22s}  "
                     f"{folds:<40s}  {summary.mean:.3f} ({summary.standard_error:.2f})")
    if report.overall is not None:
        folds = " ".join(f"{v:+.3f}" for v in report.overall.per_fold)
        lines.append(f"{'Average':<22s}  {folds:<40s}  "
                     f"{report.overall.mean:.3f} ({report.overall.standard_error:.2f})")
    return "\n".join(lines)


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    defaults = {"data": None, "out": None, **_MODEL_DEFAULTS, **_TRAIN_DEFAULTS}
    resolved = _resolve(args, file_cfg, defaults)
    data_dir = Path(_require(resolved, "data", "train"))
    out_dir = Path(_require(resolved, "out", "train"))
    resolved["data"], resolved["out"] = str(data_dir), str(out_dir)

    dataset = Dataset.load(data_dir)
    model_config = _model_config(resolved)
    train_cfg = _train_config(resolved)

    from .harness import split_for_validation

    counts = {t: len(s) for t, s in dataset.manifest.segments_by_teacher().items()}
    teachers = dataset.manifest.teacher_ids()
    fit, sched = split_for_validation(teachers, counts, train_cfg.val_fraction,
                                      train_cfg.seed)
    model = build_model(model_config)
    history = train(model, dataset.examples_for_teachers(fit),
                    dataset.examples_for_teachers(sched), train_cfg)

    _write_resolved(out_dir, resolved)
    (out_dir / "history.txt").write_text(history.table() + "\n", encoding="utf-8")
    (out_dir / "history.json").write_text(
        json.dumps(history.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    save_model(model, out_dir / "model.dfm")
    print(f"trained {model.num_parameters()} parameters; "
          f"best val loss {history.best_val_loss:.6f} at epoch {history.best_epoch}")
    print(f"outputs in {out_dir}")
    return 0


def _write_predictions(path: Path, predictions) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["segment_id", "component", "true_rating",
                         "predicted_rating", "fold"])
        for row in predictions:
            writer.writerow([row.segment_id, row.component, row.true_rating,
                             row.predicted_rating, row.fold])


def cmd_cv(args) -> int:
    file_cfg = _load_config_file(args.config)
    defaults = {"data": None, "out": None, "jobs": 1,
                "grid_lr": None, "grid_batch": None, "grid_m": None,
                **_MODEL_DEFAULTS, **_TRAIN_DEFAULTS}
    resolved = _resolve(args, file_cfg, defaults)
    data_dir = Path(_require(resolved, "data", "cv"))
    out_dir = Path(_require(resolved, "out", "cv"))
    resolved["data"], resolved["out"] = str(data_dir), str(out_dir)

    dataset = Dataset.load(data_dir)
    result = run_nested_cv(dataset, _model_config(resolved), _train_config(resolved),
                           grid=_grid(resolved), seed=resolved["seed"],
                           jobs=resolved["jobs"])

    _write_resolved(out_dir, resolved)
    _write_predictions(out_dir / "predictions.csv", result.predictions)
    report_doc = result.report.to_dict()
    report_doc["best_grid_points"] = [p.label() for p in result.best_points]
    (out_dir / "report.json").write_text(
        json.dumps(report_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    text = _report_text(result.report)
    (out_dir / "report.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_ablate(args) -> int:
    file_cfg = _load_config_file(args.config)
    defaults = {"data": None, "out": None, "jobs": 1, "axes": ["modality"],
                "grid_lr": None, "grid_batch": None, "grid_m": None,
                **_MODEL_DEFAULTS, **_TRAIN_DEFAULTS}
    resolved = _resolve(args, file_cfg, defaults)
    data_dir = Path(_require(resolved, "data", "ablate"))
    out_dir = Path(_require(resolved, "out", "ablate"))
    resolved["data"], resolved["out"] = str(data_dir), str(out_dir)

    dataset = Dataset.load(data_dir)
    result = run_ablation(dataset, resolved["axes"], _model_config(resolved),
                          _train_config(resolved), grid=_grid(resolved),
                          seed=resolved["seed"], jobs=resolved["jobs"])

    _write_resolved(out_dir, resolved)
    (out_dir / "ablation.json").write_text(
        json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    table = result.table()
    (out_dir / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


# -- correlate ------------------------------------------------------------------


def _read_predictions(path: Path) -> dict[str, dict[str, float]]:
    """Prediction table -> component -> segment_id -> predicted rating."""
    out: dict[str, dict[str, float]] = {}
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            out.setdefault(row["component"], {})[row["segment_id"]] = \
                float(row["predicted_rating"])
    if not out:
        raise UsageError(f"prediction table {path} is empty")
    return out


def cmd_correlate(args) -> int:
    file_cfg = _load_config_file(args.config)
    defaults = {"data": None, "predictions": None, "out": None}
    resolved = _resolve(args, file_cfg, defaults)
    data_dir = Path(_require(resolved, "data", "correlate"))
    out_dir = Path(_require(resolved, "out", "correlate"))
    predictions_path = Path(_require(resolved, "predictions", "correlate"))
    resolved.update(data=str(data_dir), out=str(out_dir),
                    predictions=str(predictions_path))

    manifest = DatasetManifest.load(data_dir / "manifest.json")
    if not manifest.student_records:
        raise UsageError("manifest has no student records to correlate against")
    predictions = _read_predictions(predictions_path)

    sources: dict[str, dict[str, dict[str, float]]] = {"human": {}, "model": {}}
    for component in COMPONENTS:
        human_scores = {s.segment_id: s.labels[component] for s in manifest.segments}
        sources["human"][component] = classroom_aggregate(human_scores, manifest)
        if component in predictions:
            sources["model"][component] = classroom_aggregate(
                predictions[component], manifest)

    doc: dict = {}
    lines = [f"{'Component':<22s} {'Source':<8s} " +
             " ".join(f"{OUTCOME_TITLES[o]:>14s}" for o in OUTCOMES)]
    for component in COMPONENTS:
        for source in ("human", "model"):
            per_teacher = sources[source].get(component)
            if per_teacher is None:
                continue
            cells = []
            for outcome in OUTCOMES:
                xs, ys = [], []
                for student in manifest.student_records:
                    xs.append(per_teacher[student.teacher_id])
                    ys.append(getattr(student, outcome))
                r, p = pearson_r(xs, ys)
                doc.setdefault(component, {}).setdefault(source, {})[outcome] = \
                    {"r": r, "p": p}
                cells.append(f"{r:+.3f}{significance_stars(p):<3s}".rjust(14))
            lines.append(f"{COMPONENT_TITLES[component]:<22s} {source:<8s} "
                         + " ".join(cells))
    text = "\n".join(lines)

    _write_resolved(out_dir, resolved)
    (out_dir / "correlations.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out_dir / "correlations.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    print(f"N = {len(manifest.student_records)} students")
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_gradient_checks(tol=args.tol, seed=args.seed)
    for report in reports:
        print(report)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed "
          f"(tol {args.tol:g})")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
