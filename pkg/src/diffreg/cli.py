"""Command-line entry point.

Every subcommand writes its artifacts plus a run manifest
(``<primary output>.manifest.json``) holding the argv, the parsed flags, the
seed and sha256 digests of inputs and outputs. ``diffreg replay MANIFEST``
re-executes a manifest and checks the outputs are byte-identical.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure. Errors
are reported as one JSON line on stderr: ``{"error": ..., "exit_code": ...,
"message": ...}``.

Output files
------------
dataset CSV     sample_id, subject_id, label, group:<name>..., f0, f1, ...
predictions     sample_id, initial, estimate, fallback, references,
                differentials, ref_weights (list cells are ';'-joined)
eval            predictions.csv (sample_id, label, initial, estimate, error,
                fallback, group:<name>...), metrics.json,
                hist_signed.csv and hist_absolute.csv (bin_left, bin_right, count)
bias            table, range, cell, n_samples, n_train, mae, std (of |error|),
                std_signed, mean_error
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .baseline import fit_ridge_baseline
from .dar import FULL_SCALE_HIDDEN, DarConfig
from .dataset import GroupDef, SynthConfig, generate_synthetic, load_dataset, save_dataset, subject_exclusive_split
from .error_model import load_error_model, save_error_model
from .errors import ConfigError, DataError, DiffRegError, NumericError
from .evaluation import (
    error_histograms,
    evaluate_model,
    group_bias_report,
    read_predictions,
    write_bias,
    write_histogram,
    write_predictions,
)
from .gradcheck import TOLERANCE, gradient_check, tiny_config
from .losses import LossConfig
from .pipeline import Pipeline, fit_error_distribution, load_checkpoint, refine_iteration, save_checkpoint
from .retrieval import RetrievalConfig, build_reference_index
from .training import TrainConfig, train_dar, write_log

MANIFEST_FORMAT = "diffreg-manifest-v1"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


GROUP_SYNTAX = "name:cat1,cat2[:shift[:w1,w2[:aging]]]"


def _group(text: str) -> GroupDef:
    """``name:cat1,cat2[:shift[:w1,w2[:aging]]]``; empty fields take defaults."""
    parts = text.split(":")
    if not 2 <= len(parts) <= 5 or not parts[0]:
        raise argparse.ArgumentTypeError(f"bad group spec {text!r}; use {GROUP_SYNTAX}")
    try:
        shift = float(parts[2]) if len(parts) > 2 and parts[2] else 0.0
        weights = tuple(float(w) for w in parts[3].split(",")) if len(parts) > 3 and parts[3] else None
        aging = float(parts[4]) if len(parts) > 4 and parts[4] else 0.0
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number in group spec {text!r}") from None
    return GroupDef(parts[0], tuple(parts[1].split(",")), shift, weights, aging)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    if isinstance(v, GroupDef):
        return {"name": v.name, "categories": list(v.categories), "shift": v.shift,
                "weights": None if v.weights is None else list(v.weights), "aging": v.aging}
    return v


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# shared flag groups
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on BLAS worker threads (default: $DIFFREG_THREADS, else library default)")
    p.add_argument("--manifest", default=None, help="manifest path (default <primary output>.manifest.json)")


def _add_bounds(p):
    p.add_argument("--label-min", type=int, default=None, help="lowest label (default: observed in --train)")
    p.add_argument("--label-max", type=int, default=None, help="highest label (default: observed in --train)")


def _add_retrieval(p):
    p.add_argument("-R", "--references", type=int, default=10, help="references per query (default 10)")
    p.add_argument("-P", "--pool", type=int, default=30, help="nearest-neighbour pool size (default 30)")
    p.add_argument("--max-widen", type=int, default=3, help="age-bucket widening steps (default 3)")
    p.add_argument("--retrieval-method", choices=("nearest", "random"), default="nearest",
                   help="pool by feature distance or uniformly from the bucket (default nearest)")
    p.add_argument("--no-subject-exclusion", action="store_true",
                   help="allow a query's own subject among its training references")


def _add_dar(p):
    _add_bounds(p)
    _add_retrieval(p)
    p.add_argument("--hidden", type=_int_list, default=FULL_SCALE_HIDDEN,
                   help="hidden layer sizes (default 2048,1024,512)")
    p.add_argument("--embed-dim", type=int, default=16, help="label embedding size (default 16)")
    p.add_argument("-C", "--max-class", type=int, default=20, help="difference classes span -C..C (default 20)")
    p.add_argument("--dropout", type=float, default=0.2, help="dropout rate (default 0.2)")
    p.add_argument("--no-second-order", action="store_true", help="drop the fractional correction head")
    p.add_argument("--epochs", type=int, default=150, help="training epochs (default 150)")
    p.add_argument("--batch-size", type=int, default=32, help="queries per step (default 32)")
    p.add_argument("--lr", type=float, default=3e-4, help="initial step size (default 0.0003)")
    p.add_argument("--no-inner-absolute", action="store_true",
                   help="drop the absolute-estimate term from the per-query pair loss")
    p.add_argument("--clip", type=float, default=20.0, help="error support bound (default 20)")
    p.add_argument("--error-dist", choices=("kde", "uniform"), default="kde",
                   help="augmentation distribution (default kde)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diffreg", description="Differential refinement of a scalar regressor.",
                     formatter_class=argparse.RawDescriptionHelpFormatter,
                     epilog="output files" + __doc__.split("Output files")[1])
    parser.add_argument("--version", action="version", version=f"diffreg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--num-subjects", type=int, default=500, help="(default 500)")
    p.add_argument("--samples-per-subject", type=int, default=4, help="(default 4)")
    p.add_argument("--feature-dim", type=int, default=32, help="(default 32)")
    p.add_argument("--noise-sigma", type=float, default=0.6, help="(default 0.6)")
    p.add_argument("--label-range", type=_int_list, default=(16, 77), help="lo,hi (default 16,77)")
    p.add_argument("--group", type=_group, action="append", default=[],
                   help=GROUP_SYNTAX + "; repeatable")

    p = sub.add_parser("split", help="subject-exclusive train/dist/test split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True, help="receives train.csv, dist.csv, test.csv")
    p.add_argument("--train-frac", type=float, default=0.78, help="(default 0.78)")
    p.add_argument("--dist-frac", type=float, default=0.02, help="(default 0.02)")

    p = sub.add_parser("train-bar", help="fit the ridge baseline")
    _add_common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="ridge penalty (default 1.0)")

    p = sub.add_parser("fit-err", help="fit the baseline error distribution")
    _add_common(p)
    p.add_argument("--model", required=True, help="baseline or pipeline file")
    p.add_argument("--dist", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clip", type=float, default=20.0, help="error support bound (default 20)")
    p.add_argument("--error-dist", choices=("kde", "uniform"), default="kde", help="(default kde)")

    p = sub.add_parser("train-dar", help="train one refinement stage on top of a baseline")
    _add_common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--model", required=True, help="baseline or pipeline to refine")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--err", help="error model file from fit-err")
    src.add_argument("--dist", help="fit the error model on this partition")
    p.add_argument("--monitor", default=None, help="dataset whose test-protocol loss is logged per epoch")
    p.add_argument("--out", required=True)
    p.add_argument("--no-warm-start", action="store_true")
    _add_dar(p)

    p = sub.add_parser("refine", help="run the full iterative refinement")
    _add_common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--dist", required=True)
    p.add_argument("--model", required=True, help="initial baseline")
    p.add_argument("--iterations", type=int, default=2, help="(default 2)")
    p.add_argument("--out", required=True, help="final checkpoint; stages go to <out>.stage<N>.json")
    p.add_argument("--no-warm-start", action="store_true")
    _add_dar(p)

    p = sub.add_parser("predict", help="predict labels for a dataset")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="MAE and error histograms")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--bin-width", type=float, default=1.0, help="histogram bin width (default 1)")

    p = sub.add_parser("bias", help="age and group bias tables")
    _add_common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--predictions", help="predictions.csv written by eval")
    src.add_argument("--model", help="model to evaluate on --data")
    p.add_argument("--data", default=None)
    p.add_argument("--train", default=None, help="training set, for per-bin training counts")
    p.add_argument("--axes", default="", help="comma-separated group names")
    p.add_argument("--age-bins", type=_int_list, default=None, help="integer bin edges")
    p.add_argument("--bin-width", type=int, default=5, help="default age bin width (default 5)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    _add_common(p)
    p.add_argument("--hidden", type=_int_list, default=(32, 16), help="(default 32,16)")
    p.add_argument("--feature-dim", type=int, default=16, help="(default 16)")
    p.add_argument("--embed-dim", type=int, default=4, help="(default 4)")
    p.add_argument("-C", "--max-class", type=int, default=4, help="(default 4)")
    p.add_argument("-R", "--references", type=int, default=2, help="(default 2)")
    p.add_argument("--queries", type=int, default=3, help="(default 3)")
    p.add_argument("--out", required=True, help="JSON report")

    p = sub.add_parser("replay", help="re-run a manifest and compare output digests")
    p.add_argument("manifest")
    return parser


# ---------------------------------------------------------------------------
# config assembly (validated before any data is read)
# ---------------------------------------------------------------------------

def _retrieval_config(a) -> RetrievalConfig:
    return RetrievalConfig(P=a.pool, R=a.references, max_widen=a.max_widen,
                           exclude_subject=not a.no_subject_exclusion, method=a.retrieval_method)


def _train_config(a) -> TrainConfig:
    return TrainConfig(epochs=a.epochs, batch_size=a.batch_size, lr=a.lr,
                       loss=LossConfig(inner_absolute=not a.no_inner_absolute))


def _dar_config(a, train) -> DarConfig:
    lo = train.label_min if a.label_min is None else a.label_min
    hi = train.label_max if a.label_max is None else a.label_max
    return DarConfig(train.feature_dim, lo, hi, a.embed_dim, a.hidden, a.max_class, a.dropout,
                     not a.no_second_order)


def _load_train(a):
    return load_dataset(a.train, a.label_min, a.label_max)


def _check_model_bounds(model, train):
    if isinstance(model, Pipeline) and (model.index.label_min, model.index.label_max) != (
            train.label_min, train.label_max):
        raise ConfigError("label bounds of --model and --train differ; pass --label-min/--label-max")


# ---------------------------------------------------------------------------
# commands; each returns (inputs, outputs)
# ---------------------------------------------------------------------------

def cmd_synth(a):
    if len(a.label_range) != 2:
        raise ConfigError("--label-range takes lo,hi")
    cfg = SynthConfig(a.num_subjects, a.samples_per_subject, a.feature_dim, a.noise_sigma,
                      tuple(a.label_range), tuple(a.group), a.seed)
    save_dataset(generate_synthetic(cfg), a.out)
    return [], [a.out]


def cmd_split(a):
    ds = load_dataset(a.data)
    parts = subject_exclusive_split(ds, a.train_frac, a.dist_frac, a.seed)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [str(out / f"{name}.csv") for name in ("train", "dist", "test")]
    for part, path in zip(parts, paths):
        save_dataset(part, path)
    return [a.data], paths


def cmd_train_bar(a):
    save_checkpoint(fit_ridge_baseline(load_dataset(a.train), a.lam), a.out)
    return [a.train], [a.out]


def cmd_fit_err(a):
    model = load_checkpoint(a.model)
    err = fit_error_distribution(model, load_dataset(a.dist), a.clip, a.error_dist)
    save_error_model(err, a.out)
    return [a.model, a.dist], [a.out]


def _log_path(out) -> str:
    return f"{out}.log.jsonl"


def cmd_train_dar(a):
    rcfg, tcfg = _retrieval_config(a), _train_config(a)
    train = _load_train(a)
    dcfg = _dar_config(a, train)
    model = load_checkpoint(a.model)
    _check_model_bounds(model, train)
    inputs = [a.train, a.model]
    if a.err:
        err = load_error_model(a.err)
        inputs.append(a.err)
    else:
        err = fit_error_distribution(model, load_dataset(a.dist, train.label_min, train.label_max), a.clip,
                                     a.error_dist)
        inputs.append(a.dist)
    monitor = None
    if a.monitor:
        monitor = load_dataset(a.monitor, train.label_min, train.label_max)
        inputs.append(a.monitor)
    n = getattr(model, "iteration", 0) + 1
    init = model.dar if (not a.no_warm_start and isinstance(model, Pipeline) and model.dar.config == dcfg) else None
    idx = build_reference_index(train, "train")
    result = train_dar(train, model, err, dcfg, tcfg, rcfg, a.seed, init=init, index=idx, monitor=monitor)
    save_checkpoint(Pipeline(model, err, idx, result.params, rcfg, n, result.log), a.out)
    write_log(result.log, _log_path(a.out))
    return inputs, [a.out, _log_path(a.out)]


def cmd_refine(a):
    rcfg, tcfg = _retrieval_config(a), _train_config(a)
    if a.iterations < 1:
        raise ConfigError("--iterations must be at least 1")
    train = _load_train(a)
    dist = load_dataset(a.dist, train.label_min, train.label_max)
    dcfg = _dar_config(a, train)
    current = load_checkpoint(a.model)
    _check_model_bounds(current, train)
    idx = build_reference_index(train, "train")
    outputs = []
    log = []
    for _ in range(a.iterations):
        current = refine_iteration(train, dist, current, dcfg, tcfg, rcfg, a.seed, a.clip, a.error_dist,
                                   warm_start=not a.no_warm_start, index=idx)
        stage_path = f"{a.out}.stage{current.iteration}.json"
        save_checkpoint(current, stage_path)
        outputs.append(stage_path)
        log += [{"iteration": current.iteration, **rec} for rec in current.train_log]
    save_checkpoint(current, a.out)
    write_log(log, _log_path(a.out))
    return [a.train, a.dist, a.model], [a.out, _log_path(a.out), *outputs]


def _join(values) -> str:
    return ";".join(v if isinstance(v, str) else repr(float(v)) for v in values)


def cmd_predict(a):
    model = load_checkpoint(a.model)
    ds = load_dataset(a.data)
    with open(a.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "initial", "estimate", "fallback", "references", "differentials", "ref_weights"])
        if isinstance(model, Pipeline):
            _, preds = model.predict_details(ds.features)
            for s, p in zip(ds.samples, preds):
                w.writerow([s.sample_id, repr(p.initial), repr(p.estimate), int(p.fallback), _join(p.references),
                            _join(p.differentials), _join(p.ref_weights)])
        else:
            for s, y in zip(ds.samples, model.predict(ds.features)):
                w.writerow([s.sample_id, repr(float(y)), repr(float(y)), 0, "", "", ""])
    return [a.model, a.data], [a.out]


def cmd_eval(a):
    if not a.bin_width > 0:
        raise ConfigError("--bin-width must be positive")
    model = load_checkpoint(a.model)
    ds = load_dataset(a.data)
    report = evaluate_model(model, ds)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: str(out / f) for k, f in (("pred", "predictions.csv"), ("metrics", "metrics.json"),
                                           ("signed", "hist_signed.csv"), ("absolute", "hist_absolute.csv"))}
    write_predictions(report, paths["pred"])
    hists = error_histograms(report, a.bin_width)
    write_histogram(hists["signed"], paths["signed"])
    write_histogram(hists["absolute"], paths["absolute"])
    metrics = {"n": len(ds), "mae": report.mae, "initial_mae": report.initial_mae,
               "fallbacks": int(report.fallback.sum())}
    Path(paths["metrics"]).write_text(json.dumps(metrics, sort_keys=True) + "\n", encoding="utf-8")
    return [a.model, a.data], [paths["metrics"], paths["pred"], paths["signed"], paths["absolute"]]


def cmd_bias(a):
    axes = [x for x in a.axes.split(",") if x]
    inputs = []
    if a.predictions:
        report = read_predictions(a.predictions)
        inputs.append(a.predictions)
    else:
        if not a.data:
            raise ConfigError("--model needs --data")
        report = evaluate_model(load_checkpoint(a.model), load_dataset(a.data))
        inputs += [a.model, a.data]
    train = None
    if a.train:
        train = load_dataset(a.train)
        inputs.append(a.train)
    write_bias(group_bias_report(report, axes, a.age_bins, train, a.bin_width), a.out)
    return inputs, [a.out]


def cmd_gradcheck(a):
    cfg = tiny_config(a.hidden, a.feature_dim, a.embed_dim, a.max_class)
    rep = gradient_check(cfg, seed=a.seed, R=a.references, queries=a.queries)
    doc = {"max_rel_err": rep.max_rel_err, "per_param": rep.per_param, "checked": rep.checked,
           "skipped_kinks": rep.skipped_kinks, "untouched_rows_zero": rep.untouched_rows_zero,
           "tolerance": TOLERANCE, "ok": rep.ok}
    _write_json(doc, a.out)
    if not rep.ok:
        raise NumericError(f"gradient check failed: max relative error {rep.max_rel_err:.3e} (tolerance {TOLERANCE})")
    return [], [a.out]


COMMANDS = {
    "synth": cmd_synth, "split": cmd_split, "train-bar": cmd_train_bar, "fit-err": cmd_fit_err,
    "train-dar": cmd_train_dar, "refine": cmd_refine, "predict": cmd_predict, "eval": cmd_eval,
    "bias": cmd_bias, "gradcheck": cmd_gradcheck,
}


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def write_manifest(a, argv, inputs, outputs) -> str:
    path = a.manifest or f"{outputs[0]}.manifest.json"
    flags = {k: _jsonable(v) for k, v in sorted(vars(a).items()) if k not in ("command", "manifest")}
    doc = {
        "format": MANIFEST_FORMAT,
        "command": a.command,
        "argv": list(argv),
        "flags": flags,
        "seed": a.seed,
        "inputs": {p: sha256_file(p) for p in inputs},
        "outputs": {p: sha256_file(p) for p in outputs},
        "version": __version__,
    }
    _write_json(doc, path)
    return path


def replay(manifest_path) -> dict:
    """Re-run a manifest's argv; returns ``{output: matches}``."""
    try:
        doc = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"no such file: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: malformed manifest ({exc.msg})") from None
    if doc.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{manifest_path}: not a {MANIFEST_FORMAT} file")
    for path, digest in doc["inputs"].items():
        if not Path(path).exists() or sha256_file(path) != digest:
            raise DataError(f"input {path} is missing or changed since the manifest was written")
    expected = doc["outputs"]
    # the original run's manifest stays untouched
    argv = [*doc["argv"], "--manifest", os.devnull]
    code = main(argv)
    if code:
        raise DataError(f"replayed command exited with status {code}")
    return {p: Path(p).exists() and sha256_file(p) == d for p, d in expected.items()}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _threads(a) -> int | None:
    if a.threads is not None:
        if a.threads < 1:
            raise ConfigError("--threads must be at least 1")
        return a.threads
    env = os.environ.get("DIFFREG_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"DIFFREG_THREADS={env!r} is not an integer") from None
        if n < 1:
            raise ConfigError("DIFFREG_THREADS must be at least 1")
        return n
    return None


def _fail(exc: BaseException, code: int) -> int:
    msg = {"error": type(exc).__name__, "exit_code": code, "message": str(exc)}
    print(json.dumps(msg, sort_keys=True), file=sys.stderr)
    return code


def run(argv) -> int:
    argv = list(argv)
    a = build_parser().parse_args(argv)
    if a.command == "replay":
        result = replay(a.manifest)
        bad = sorted(p for p, ok in result.items() if not ok)
        if bad:
            raise DataError(f"outputs differ from the manifest: {bad}")
        print(json.dumps({"replayed": a.manifest, "identical": sorted(result)}, sort_keys=True))
        return 0
    with threadpool_limits(limits=_threads(a)):
        inputs, outputs = COMMANDS[a.command](a)
    if a.manifest != os.devnull:
        write_manifest(a, argv, inputs, outputs)
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except DiffRegError as exc:
        return _fail(exc, exc.exit_code)
    except FloatingPointError as exc:
        return _fail(exc, NumericError.exit_code)
    except OSError as exc:
        return _fail(exc, DataError.exit_code)


if __name__ == "__main__":
    sys.exit(main())
