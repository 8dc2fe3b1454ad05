"""Command-line entry point: ``cycledeform <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .dataio import load_labels, load_points, read_manifest, write_dataset, write_labels, write_points
from .errors import CycleDeformError, DataError, NumericalError
from .geometry import chamfer_asym, miou
from .model import IdentityMapper, Model
from .synthetic import FAMILIES, SynthSpec, generate_synthetic
from .training import LOSS_COLUMNS, PRECISIONS, TrainConfig, train
from .transfer import METHODS, CachedMapper, Criterion, few_shot

log = logging.getLogger("cycledeform")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
CSV_LOSS_HEADER = ["epoch", "lCh", "lCy2", "lCy3", "lSR", "lTotal", "lr"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config files


def read_config_file(path) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment. Keys may use
    dashes or underscores."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _coerce(value, like):
    """Convert a config-file string to the type of the default ``like``."""
    if not isinstance(value, str):
        return value
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value


TRAIN_FIELDS = {f.name: f.default for f in dataclasses.fields(TrainConfig)}


def resolve_train_config(args, file_cfg: dict, base: TrainConfig | None = None) -> TrainConfig:
    values = dataclasses.asdict(base) if base is not None else dict(TRAIN_FIELDS)
    for key, raw in file_cfg.items():
        if key in values:
            values[key] = _coerce(raw, TRAIN_FIELDS[key])
    for key in TRAIN_FIELDS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    for key in ("seed", "threads", "precision"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metadata(out_dir: Path, command: str, config: dict, extra: dict | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "command": command,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": config,
        **(extra or {}),
    }
    path = out_dir / "metadata.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(type(obj))


def _load_model(path, precision: str | None):
    state = load_checkpoint(path)
    model = state.model
    if precision is not None and np.dtype(PRECISIONS[precision]) != model.dtype:
        dtype = PRECISIONS[precision]
        model = Model(model.cfg, dtype=dtype, params={k: v.astype(dtype) for k, v in model.params.items()})
    return state, model


# ---------------------------------------------------------------------------
# commands


def write_loss_csv(path, history: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_LOSS_HEADER)
        for rec in history:
            w.writerow([rec["epoch"]] + [_fmt(rec[k]) for k in LOSS_COLUMNS[1:]])


def cmd_train(args, file_cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume:
        state = load_checkpoint(args.resume)
        cfg = resolve_train_config(args, file_cfg, base=state.cfg)
        state.cfg = cfg
    else:
        cfg = resolve_train_config(args, file_cfg)
    manifest = read_manifest(args.manifest).select(split="train", category=args.category)
    shapes = manifest.load()
    ckpt = out / "checkpoint.cydf"
    write_metadata(out, "train", cfg.to_dict(), {
        "architecture": cfg.model_config().descriptor(),
        "manifest": str(args.manifest),
        "category": args.category,
        "train_shapes": len(shapes),
        "status": "running",
    })
    state = train(cfg, shapes, state=state, checkpoint_path=ckpt,
                  on_epoch=lambda st, rec: write_loss_csv(out / "losses.csv", st.history))
    write_loss_csv(out / "losses.csv", state.history)
    write_metadata(out, "train", cfg.to_dict(), {
        "architecture": cfg.model_config().descriptor(),
        "manifest": str(args.manifest),
        "category": args.category,
        "train_shapes": len(shapes),
        "epochs_completed": state.epoch,
        "checkpoint": str(ckpt),
        "status": "done",
    })
    print(f"trained {state.epoch} epochs; checkpoint {ckpt}")
    return EXIT_OK


def write_deformed(mapper, source: np.ndarray, target: np.ndarray, out: Path, color: bool = False) -> float:
    """Write ``map(source, target)`` in source order; returns its asymmetric
    Chamfer distance to the target."""
    moved = np.asarray(mapper.map(source, target).value, dtype=np.float64)
    write_points(out, moved)
    if color:
        write_labels(out.with_suffix(".tag"), np.arange(len(moved)) % 2)
    return chamfer_asym(moved, target)


def cmd_deform(args, file_cfg) -> int:
    state, model = _load_model(args.checkpoint, args.precision)
    source, target = load_points(args.source), load_points(args.target)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dist = write_deformed(model, source, target, out, args.color)
    write_metadata(out.parent, "deform", {"checkpoint": args.checkpoint, "source": args.source,
                                          "target": args.target, "out": str(out), "color": args.color},
                   {"architecture": model.cfg.descriptor(), "chamfer_to_target": dist})
    print(f"chamfer_asym(deformed, target) = {dist:.9g}")
    return EXIT_OK


def _transfer_settings(args, file_cfg) -> dict:
    settings = {"shots": 10, "criterion": "nn", "k": 1, "method": "ours", "repeats": 1, "category": None}
    for key in settings:
        if key in file_cfg:
            settings[key] = _coerce(file_cfg[key], settings[key]) if settings[key] is not None else file_cfg[key]
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = flag
    if settings["method"] not in METHODS:
        raise UsageError(f"--method must be one of {METHODS}")
    if settings["criterion"] != "oracle":
        try:
            Criterion.parse(settings["criterion"])
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if settings["shots"] < 1 or settings["k"] < 1 or settings["repeats"] < 1:
        raise UsageError("--shots, --k and --repeats must be positive")
    return settings


def cmd_transfer(args, file_cfg) -> int:
    s = _transfer_settings(args, file_cfg)
    seed = args.seed if args.seed is not None else int(file_cfg.get("seed", 0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(args.manifest)
    everything = manifest.select(category=s["category"]).load()
    split = {r.id: r.split for r in manifest.records}
    labeled = [c for c in everything if split[c.name] == "train"]
    targets = [c for c in everything if split[c.name] == "test"]
    if not labeled or not targets:
        raise DataError("transfer needs labelled train shapes and test targets in the manifest")
    model = None
    architecture = None
    if args.checkpoint:
        _, model = _load_model(args.checkpoint, args.precision)
        architecture = model.cfg.descriptor()
    needs_model = s["method"] == "ours" or s["criterion"] not in ("nn", "oracle")
    if needs_model and model is None:
        raise UsageError("this method/criterion needs --checkpoint")
    mapper = CachedMapper(model) if model is not None else None
    run_seeds = [int(ss.generate_state(1)[0]) for ss in np.random.SeedSequence(seed).spawn(s["repeats"])]
    runs = []
    with open(out / "per_shape.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "seed", "shape", "miou"])
        for r, run_seed in enumerate(run_seeds):
            run = few_shot(mapper, labeled, targets, s["shots"], s["method"], s["criterion"], s["k"], run_seed)
            runs.append(run)
            pred_dir = out / f"run{r:02d}"
            pred_dir.mkdir(exist_ok=True)
            for name, pred in run.predictions.items():
                write_labels(pred_dir / f"{name}.seg", pred)
                w.writerow([r, run_seed, name, _fmt(run.mious[name])])
    means = np.array([run.mean_miou for run in runs])
    with open(out / "runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "seed", "mean_miou"])
        for r, (run_seed, m) in enumerate(zip(run_seeds, means)):
            w.writerow([r, run_seed, _fmt(m)])
    std = float(means.std(ddof=1)) if len(means) > 1 else 0.0
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["statistic", "value"])
        w.writerow(["mean", _fmt(means.mean())])
        w.writerow(["std", _fmt(std)])
    write_metadata(out, "transfer", {**s, "seed": seed, "checkpoint": args.checkpoint,
                                      "manifest": str(args.manifest)},
                   {"architecture": architecture, "run_seeds": run_seeds,
                    "cosine_encoder_slot": "A", "std_ddof": 1,
                    "shots_per_run": [run.shots for run in runs]})
    print(f"mean mIoU over {len(runs)} run(s): {means.mean():.4f} (std {std:.4f})")
    return EXIT_OK


def evaluate_dirs(pred_dir: Path, gt_dir: Path, num_parts: int | None = None) -> list[tuple[str, float]]:
    preds = sorted(pred_dir.glob("*.seg"))
    if not preds:
        raise DataError(f"no .seg files in {pred_dir}")
    rows = []
    loaded = []
    for p in preds:
        gt_path = gt_dir / p.name
        if not gt_path.exists():
            raise DataError(f"no ground truth for {p.name} in {gt_dir}")
        loaded.append((p.stem, load_labels(p), load_labels(gt_path)))
    parts = num_parts or max(int(max(a.max(), b.max())) + 1 for _, a, b in loaded)
    for name, pred, gt in loaded:
        rows.append((name, miou(pred, gt, parts)))
    return rows


def cmd_eval(args, file_cfg) -> int:
    rows = evaluate_dirs(Path(args.pred), Path(args.gt), args.num_parts)
    mean = float(np.mean([v for _, v in rows]))
    out = sys.stdout if args.out is None else open(args.out, "w", newline="", encoding="utf-8")
    try:
        w = csv.writer(out)
        w.writerow(["shape", "miou"])
        for name, v in rows:
            w.writerow([name, _fmt(v)])
        w.writerow(["mean", _fmt(mean)])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_synth(args, file_cfg) -> int:
    seed = args.seed if args.seed is not None else int(file_cfg.get("seed", 0))
    spec = SynthSpec(args.family, args.count, seed, args.points)
    shapes = generate_synthetic(spec)
    path = write_dataset(args.out, shapes, args.family, args.train_fraction, seed, binary=args.binary)
    write_metadata(Path(args.out), "synth", {"family": args.family, "count": args.count, "seed": seed,
                                             "points_per_shape": args.points,
                                             "train_fraction": args.train_fraction, "binary": args.binary},
                   {"parts": list(FAMILIES[args.family]), "ranges": spec.resolved_ranges()})
    print(f"wrote {len(shapes)} shapes; manifest {path}")
    return EXIT_OK


def cmd_gradcheck(args, file_cfg) -> int:
    from .gradcheck import run_suite

    seed = args.seed if args.seed is not None else 0
    result = run_suite(seed, args.points, args.width, args.max_entries)
    for line in result.lines:
        print(line)
    print(f"{'PASS' if result.passed else 'FAIL'} overall in {result.seconds:.1f}s")
    return EXIT_OK if result.passed else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# parser


def _kebab(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="file of 'key = value' lines; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--precision", choices=sorted(PRECISIONS))
    common.add_argument("--log-level", default="WARNING")

    parser = _Parser(prog="cycledeform", description="Cycle-consistent deformation networks for point clouds.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train a deformation model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--category")
    p.add_argument("--resume", help="checkpoint to continue from")
    for name, default in TRAIN_FIELDS.items():
        if name in ("seed", "threads", "precision"):
            continue
        if isinstance(default, bool):
            p.add_argument(_kebab(name), dest=name, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, tuple):
            p.add_argument(_kebab(name), dest=name, type=int, nargs="+")
        else:
            p.add_argument(_kebab(name), dest=name, type=type(default))

    p = sub.add_parser("deform", parents=[common], help="deform a source cloud towards a target")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--color", action="store_true", help="also write a .tag file with source-index parity")

    p = sub.add_parser("transfer", parents=[common], help="few-shot label transfer")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--category")
    p.add_argument("--shots", type=int)
    p.add_argument("--criterion", choices=[c.value for c in Criterion] + ["oracle"])
    p.add_argument("--k", type=int, help="number of voting sources")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--repeats", type=int)

    p = sub.add_parser("eval", parents=[common], help="mIoU of predicted against ground-truth .seg files")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--num-parts", type=int)
    p.add_argument("--out")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic labelled dataset")
    p.add_argument("--family", choices=sorted(FAMILIES), default="table")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--binary", action="store_true", help="write .xyzb binary point files")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--points", type=int, default=64)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--max-entries", type=int, default=100)
    return parser


COMMANDS = {
    "train": cmd_train,
    "deform": cmd_deform,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = read_config_file(args.config) if args.config else {}
        if args.precision is None and "precision" in file_cfg:
            args.precision = file_cfg["precision"]
        return COMMANDS[args.command](args, file_cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CycleDeformError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
