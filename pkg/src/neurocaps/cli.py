"""Command-line front end: ``neurocaps <command> [flags]``.

Every command accepts ``--config FILE`` with ``key = value`` lines whose keys
are flag names (dashes or underscores); explicit flags win.  Each run writes
``<out>.manifest.json`` with the config, seed, input/output checksums and
format versions.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import reports
from .capsnet import default_deltas, perturb_and_decode
from .data import io as ngds
from .data.pca import fold_pca_into_model, pca_fit, pca_transform
from .data.splits import kfold_by_patient, split_stratified_by_patient, subsample_fraction
from .data.synthetic import DEFAULT_PRIORS, gen_synthetic
from .data.dataset import LabeledImageSet
from .energy import EnergyModel, joules_per_inference, loihi_energy_bounds
from .errors import CompileError, NeurocapsError
from .ir import serialize as nnir
from .ir import zoo
from .ir.graph import ModelGraph, predict
from .ir.train import LRSchedule, TrainConfig, differential_multipliers, train
from .metrics import confusion, macro_f1, mcc
from .snn import network as snnc
from .snn.compile import DEFAULT_PERCENTILE, normalize_and_convert, validate_convertible
from .snn.sim import SimConfig, run_batch, timestep_sweep, write_trace_csv

logger = logging.getLogger("neurocaps")

FORMAT_VERSIONS = {"NGDS": ngds.VERSION, "NNIR": nnir.VERSION, "SNNC": snnc.VERSION}
ARCH_DEFAULTS = {
    "capsnet": {"loss": "capsule_margin", "lr_policy": "exp:0.001:0.95"},
    "cnn": {"loss": "cross_entropy", "lr_policy": "exp:0.002:0.9"},
    "dense": {"loss": "cross_entropy", "lr_policy": "exp:0.002:0.9"},
    "resnet": {"loss": "cross_entropy", "lr_policy": "exp:0.002:0.9"},
}


class UsageError(Exception):
    pass


# --- parsing helpers -------------------------------------------------------

def parse_float_list(text: str) -> list:
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def parse_int_list(text: str) -> list:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def parse_index_set(text: str) -> list:
    """``"0..3,5"`` -> [0, 1, 2, 3, 5] (ranges inclusive)."""
    out = set()
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ".." in part:
                lo, hi = part.split("..")
                out.update(range(int(lo), int(hi) + 1))
            else:
                out.add(int(part))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad layer index set {text!r}") from None
    return sorted(out)


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def read_key_values(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def write_manifest(args, inputs, outputs, started, wall) -> Path:
    primary = Path(outputs[0])
    path = primary.with_name(primary.name + ".manifest.json")
    config = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func",)}
    manifest = {
        "command": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): sha256(p) for p in inputs if p},
        "outputs": {str(p): sha256(p) for p in outputs if p and Path(p).exists()},
        "formats": FORMAT_VERSIONS,
        "started_utc": started,
        "duration_seconds": round(wall, 3),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_any_dataset(path) -> LabeledImageSet:
    return ngds.load_dataset(path)


# --- commands --------------------------------------------------------------

def cmd_gen_data(args):
    ds = gen_synthetic(args.n, args.priors, args.patients, args.seed, args.size)
    ngds.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples ({ds.class_counts().tolist()} per class, "
          f"{len(ds.patients())} patients) to {args.out}")
    return [], [args.out]


def cmd_split(args):
    ds = load_any_dataset(args.data)
    tr, te = split_stratified_by_patient(ds, args.test_fraction, args.seed)
    ngds.save_dataset(tr, args.train_out)
    ngds.save_dataset(te, args.test_out)
    for note in tr.notes:
        print(f"note: {note}")
    print(f"train {len(tr)} / test {len(te)}")
    return [args.data], [args.train_out, args.test_out]


def _train_config(args, num_layers: int) -> TrainConfig:
    defaults = ARCH_DEFAULTS[args.arch]
    multipliers = {}
    if args.differential:
        multipliers = differential_multipliers(num_layers, args.differential_groups,
                                               args.differential_ratio)
    return TrainConfig(
        optimizer=args.optimizer,
        schedule=LRSchedule.parse(args.lr_policy or defaults["lr_policy"]),
        batch_size=args.batch_size,
        epochs=args.epochs,
        freeze_mask=frozenset(args.freeze or ()),
        group_lr_multipliers=multipliers,
        loss=args.loss or defaults["loss"],
        seed=args.seed,
        schedule_unit=args.schedule_unit,
    )


def _build_model(args, ds: LabeledImageSet, input_shape=None) -> ModelGraph:
    shape = tuple(input_shape or ds.sample_shape)
    k = ds.num_classes
    if args.arch == "dense":
        return zoo.dense_mlp(shape, k, args.seed, hidden=args.hidden)
    return zoo.ARCHITECTURES[args.arch](shape, k, args.seed)


def fit_model(args, ds: LabeledImageSet, val: LabeledImageSet | None, on_epoch=None):
    """Build (or load) and train a model; handles the PCA variant of the dense arch."""
    inputs = []
    if args.pca and args.arch != "dense":
        raise UsageError("--pca is only available with --arch dense")
    if args.pca:
        pca = pca_fit(ds.images, args.pca)
        proj = LabeledImageSet(pca_transform(pca, ds.images), ds.labels, ds.patient_ids, ds.class_names)
        pval = None if val is None else LabeledImageSet(
            pca_transform(pca, val.images), val.labels, val.patient_ids, val.class_names)
        model = _build_model(args, ds, (args.pca,))
        cfg = _train_config(args, len(model.layers))
        trained, history = train(model, proj, cfg, pval, on_epoch)
        trained = fold_pca_into_model(pca, trained, ds.sample_shape)
        return trained, history, cfg, inputs
    if args.init:
        model = nnir.load_model(args.init)
        inputs.append(args.init)
    else:
        model = _build_model(args, ds)
    cfg = _train_config(args, len(model.layers))
    trained, history = train(model, ds, cfg, val, on_epoch)
    return trained, history, cfg, inputs


def cmd_train(args):
    ds = load_any_dataset(args.data)
    val = load_any_dataset(args.val) if args.val else None
    model, history, cfg, extra = fit_model(
        args, ds, val, on_epoch=lambda r: print(
            f"epoch {r.epoch}: loss {r.loss:.4f} train_acc {r.train_acc:.4f} "
            f"val_acc {r.val_acc:.4f} lr {r.lr:.6g}", flush=True))
    model.metadata = dict(model.metadata, arch=args.arch, train_config=cfg.to_dict())
    nnir.save_model(model, args.out)
    hist = args.history or f"{args.out}.history.csv"
    reports.write_csv(hist, reports.HISTORY_HEADER, reports.history_rows(history))
    return [args.data, args.val, *extra], [args.out, hist]


def cmd_convert(args):
    model = nnir.load_model(args.model)
    violations = validate_convertible(model)
    if violations:
        for v in violations:
            print(f"conversion rejected: {v}", file=sys.stderr)
        raise CompileError("; ".join(violations))
    calib = load_any_dataset(args.calib)
    net, report = normalize_and_convert(model, calib, args.percentile, evaluate=not args.no_eval,
                                        timesteps=args.T)
    snnc.save_network(net, args.out)
    path = args.report or f"{args.out}.report.csv"
    reports.write_csv(path, ("field", "value"), report.rows())
    if report.conversion_gap is not None:
        print(f"ANN {report.ann_accuracy:.4f} SNN {report.snn_accuracy:.4f} "
              f"gap {report.conversion_gap:+.4f}")
    return [args.model, args.calib], [args.out, path]


def cmd_simulate(args):
    net = snnc.load_network(args.snn)
    ds = load_any_dataset(args.data)
    outputs = [args.out]
    if args.sweep_T:
        rows = timestep_sweep(net, ds, args.sweep_T, args.encoder, args.seed,
                              args.max_rate_scale, args.threads)
        reports.emit(args.out, reports.SWEEP_HEADER, reports.sweep_rows(rows))
        outputs.append(f"{args.out}.md")
        for r in rows:
            print(f"T={r.T}: accuracy {r.accuracy:.4f}")
    else:
        cfg = SimConfig(args.T, args.encoder, args.max_rate_scale, args.seed)
        trace = run_batch(net, ds.images, cfg, record_output=bool(args.trace), threads=args.threads)
        cm = confusion(trace.predictions, ds.labels, net.class_count)
        rows = [("T", args.T), ("encoder", args.encoder), ("seed", args.seed),
                ("samples", len(ds)), ("accuracy", cm.accuracy), ("mcc", mcc(cm)),
                ("f1", macro_f1(cm))]
        reports.write_csv(args.out, ("metric", "value"), rows)
        print(f"accuracy {cm.accuracy:.4f} mcc {mcc(cm):.4f}")
        if args.trace:
            write_trace_csv(args.trace, trace.output_spikes[:, args.trace_sample])
            outputs.append(args.trace)
    return [args.snn, args.data], outputs


def parse_energy_config(path) -> dict:
    """Group ``name.field = value`` entries into per-row energy figures."""
    groups = {}
    for key, value in read_key_values(path).items():
        if "." not in key:
            raise UsageError(f"energy config key {key!r} must look like name.field")
        name, fld = key.split(".", 1)
        groups.setdefault(name, {})[fld] = value
    out = {}
    for name, g in groups.items():
        try:
            if "power_watts" in g:
                out[name] = joules_per_inference(float(g["power_watts"]), float(g["inferences_per_second"]))
            elif "per_core_watts" in g:
                gpu = g.get("gpu_joules_per_inference")
                gpu = out[g["reference"]] if gpu is None else float(gpu)
                m = EnergyModel(gpu, float(g.get("efficiency_factor", 109)), float(g["per_core_watts"]),
                                int(g["cores"]), float(g["inferences_per_second"]))
                out[name] = loihi_energy_bounds(m)
            else:
                raise UsageError(f"energy row {name!r} needs power_watts or per_core_watts")
        except KeyError as exc:
            raise UsageError(f"energy row {name!r} is missing {exc}") from None
    return out


def _load_artifact(path):
    head = Path(path).read_bytes()[:4]
    if head == snnc.MAGIC:
        return "snn", snnc.load_network(path)
    return "ann", nnir.load_model(path)


def _predict_any(kind, obj, images, args):
    if kind == "snn":
        return run_batch(obj, images, SimConfig(args.T, "constant_current"), threads=args.threads).predictions
    return predict(obj, images)


def _throughput(kind, obj, images, args) -> float:
    reps = int(np.ceil(args.throughput_n / len(images)))
    batch = np.concatenate([images] * reps)[:args.throughput_n]
    rates = []
    for _ in range(args.throughput_runs):
        t0 = time.perf_counter()
        _predict_any(kind, obj, batch, args)
        rates.append(len(batch) / (time.perf_counter() - t0))
    return statistics.median(rates)


def cmd_benchmark(args):
    test = load_any_dataset(args.data)
    train_set = load_any_dataset(args.train_data) if args.train_data else None
    energy = parse_energy_config(args.energy_config) if args.energy_config else {}
    inputs = [args.data, args.train_data, args.energy_config]
    acc_rows, speed_rows = [], []
    for spec in args.models:
        if "=" not in spec:
            raise UsageError(f"--models entries must be name=path, got {spec!r}")
        name, path = spec.split("=", 1)
        inputs.append(path)
        kind, obj = _load_artifact(path)
        preds = _predict_any(kind, obj, test.images, args)
        cm = confusion(preds, test.labels, test.num_classes)
        eff = None
        if train_set is not None and kind == "ann":
            arch = obj.metadata.get("arch", "cnn")
            sub = subsample_fraction(train_set, args.fraction, args.seed)
            fresh = ModelGraph.build(obj.layers, obj.input_shape, obj.class_count, args.seed, obj.metadata)
            ns = argparse.Namespace(**vars(args))
            ns.arch = arch if arch in ARCH_DEFAULTS else "cnn"
            cfg = _train_config(ns, len(fresh.layers))
            small, _ = train(fresh, sub, cfg)
            eff = float(np.mean(predict(small, test.images) == test.labels))
        acc_rows.append((name, cm.accuracy, eff, reports.energy_cell(energy[name]) if name in energy else None))
        header, rows = reports.class_table(cm, test.class_names)
        reports.write_csv(f"{args.out}.{name}.classes.csv", header, rows)
        if not args.no_throughput:
            speed_rows.append((name, _throughput(kind, obj, test.images, args)))
    for name, value in energy.items():
        if name not in {r[0] for r in acc_rows}:
            acc_rows.append((name, None, None, reports.energy_cell(value)))
    print(reports.emit(args.out, reports.ACCURACY_HEADER, acc_rows))
    outputs = [args.out, f"{args.out}.md"]
    if speed_rows:
        speed_path = args.throughput_out or f"{args.out}.throughput.csv"
        print(reports.emit(speed_path, reports.THROUGHPUT_HEADER, speed_rows))
        outputs.append(speed_path)
    return inputs, outputs


def cmd_crossval(args):
    ds = load_any_dataset(args.data)
    cms = []
    for i, (tr, va) in enumerate(kfold_by_patient(ds, args.folds, args.seed)):
        model, _, _, _ = fit_model(args, tr, None)
        cms.append(confusion(predict(model, va.images), va.labels, ds.num_classes))
        print(f"fold {i + 1}: accuracy {cms[-1].accuracy:.4f}", flush=True)
    header, rows = reports.fold_table(cms)
    print(reports.emit(args.out, header, rows))
    pooled = type(cms[0])(sum(c.counts for c in cms))
    cls_path = f"{args.out}.classes.csv"
    header, rows = reports.class_table(pooled, ds.class_names)
    print(reports.emit(cls_path, header, rows))
    return [args.data], [args.out, cls_path]


def write_pgm(path, image: np.ndarray) -> None:
    pixels = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def cmd_explain(args):
    model = nnir.load_model(args.model)
    ds = load_any_dataset(args.data)
    if not 0 <= args.image < len(ds):
        raise UsageError(f"--image must index the dataset (0..{len(ds) - 1})")
    image = ds.images[args.image]
    deltas = args.deltas if args.deltas is not None else default_deltas()
    dims = args.dims if args.dims is not None else list(range(model.capsule_layer().caps_dim
                                                                if model.capsule_layer() else 0))
    h, w = model.input_shape[-2:]
    grid = np.zeros((len(dims) * h, len(deltas) * w), dtype=np.float32)
    cells = []
    for r, dim in enumerate(dims):
        tiles = perturb_and_decode(model, image, args.capsule, dim, deltas)
        for c, (delta, tile) in enumerate(zip(deltas, tiles)):
            grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = tile
            cells.append({"row": r, "col": c, "dim": dim, "delta": delta})
    write_pgm(args.out, grid)
    cell_path = f"{args.out}.cells.json"
    Path(cell_path).write_text(json.dumps({"capsule": args.capsule, "tile": [h, w], "cells": cells},
                                          indent=2) + "\n")
    print(f"wrote {len(cells)} tiles to {args.out}")
    return [args.model, args.data], [args.out, cell_path]


# --- parser ----------------------------------------------------------------

def _common(p, out_required=True):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="sample-level worker threads (results do not depend on it)")
    p.add_argument("--out", required=out_required)
    p.add_argument("-v", "--verbose", action="store_true")


def _train_flags(p):
    p.add_argument("--arch", choices=sorted(ARCH_DEFAULTS), default="cnn")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--lr-policy", help="const:LR | exp:LR:RATE | cyclical:BASE:MAX:STEP")
    p.add_argument("--schedule-unit", choices=("epoch", "batch"), default="epoch")
    p.add_argument("--loss", choices=("cross_entropy", "capsule_margin"))
    p.add_argument("--freeze", type=parse_index_set, help="layer indices, e.g. 0..3,5")
    p.add_argument("--differential", type=parse_bool, default=False,
                   help="per-group learning-rate multipliers")
    p.add_argument("--differential-groups", type=int, default=3)
    p.add_argument("--differential-ratio", type=float, default=3.0)
    p.add_argument("--init", help="NNIR model to fine-tune instead of a fresh one")
    p.add_argument("--hidden", type=int, default=64, help="dense arch hidden units")
    p.add_argument("--pca", type=int, default=0, help="dense arch: train on K PCA features")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neurocaps", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic NGDS dataset")
    _common(p)
    p.add_argument("--n", type=int, default=3064)
    p.add_argument("--patients", type=int, default=233)
    p.add_argument("--priors", type=parse_float_list, default=list(DEFAULT_PRIORS))
    p.add_argument("--size", type=int, default=28)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="patient-stratified train/test split")
    _common(p, out_required=False)
    p.add_argument("--data", required=True)
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--train-out", required=True)
    p.add_argument("--test-out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model, write NNIR + history CSV")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--history")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="compile an NNIR model into an SNNC spiking network")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--percentile", type=float, default=DEFAULT_PERCENTILE)
    p.add_argument("--T", type=int, default=256, help="timesteps for the accuracy check")
    p.add_argument("--no-eval", action="store_true", help="skip ANN/SNN accuracy on the calibration set")
    p.add_argument("--report")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("simulate", help="run a spiking network over a dataset")
    _common(p)
    p.add_argument("--snn", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--T", type=int, default=256)
    p.add_argument("--encoder", choices=("constant_current", "poisson"), default="constant_current")
    p.add_argument("--max-rate-scale", type=float, default=1.0)
    p.add_argument("--sweep-T", type=parse_int_list)
    p.add_argument("--trace", help="CSV of per-step output spikes for one sample")
    p.add_argument("--trace-sample", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("benchmark", help="accuracy / sample-efficiency / energy / throughput tables")
    _common(p)
    p.add_argument("--models", nargs="+", required=True, help="name=path (NNIR or SNNC)")
    p.add_argument("--data", required=True, help="test set")
    p.add_argument("--train-data", help="enables the reduced-training-data column")
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--energy-config")
    p.add_argument("--T", type=int, default=256)
    p.add_argument("--throughput-n", type=int, default=1000)
    p.add_argument("--throughput-runs", type=int, default=3)
    p.add_argument("--no-throughput", action="store_true")
    p.add_argument("--throughput-out")
    _train_flags(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("crossval", help="k-fold patient cross-validation tables")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=5)
    _train_flags(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("explain", help="decode perturbed capsule dimensions into an image grid")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--image", type=int, default=0, help="sample index in --data")
    p.add_argument("--capsule", type=int, default=0)
    p.add_argument("--dims", type=parse_int_list)
    p.add_argument("--deltas", type=parse_float_list)
    p.set_defaults(func=cmd_explain)
    return parser


def _apply_config_file(parser, argv):
    """Re-parse with the config file's values installed as subcommand defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre.add_argument("command", nargs="?")
    known, _ = pre.parse_known_args(argv)
    if not known.config or known.command not in parser._subparsers._group_actions[0].choices:
        return parser.parse_args(argv)
    try:
        values = read_key_values(known.config)
    except (OSError, UsageError) as exc:
        parser.error(str(exc))
    sub = parser._subparsers._group_actions[0].choices[known.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            parser.error(f"unknown config key {key!r} for {known.command}")
        if isinstance(actions[dest], argparse._StoreTrueAction):
            try:
                value = parse_bool(value)
            except argparse.ArgumentTypeError as exc:
                parser.error(str(exc))
        defaults[dest] = value
    sub.set_defaults(**defaults)
    # Required flags satisfied by the file must not be demanded again.
    for dest in defaults:
        actions[dest].required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config_file(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    try:
        inputs, outputs = args.func(args)
    except UsageError as exc:
        print(f"neurocaps {args.command}: {exc}", file=sys.stderr)
        return 2
    except (NeurocapsError, OSError, ValueError) as exc:
        print(f"neurocaps {args.command}: error: {exc}", file=sys.stderr)
        return 1
    manifest = write_manifest(args, [p for p in inputs if p], outputs, started, time.perf_counter() - t0)
    logger.info("manifest: %s", manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
