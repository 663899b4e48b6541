"""Command-line entry point: ``slimunet <command> [options]``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .data import (
    PhantomSpec,
    generate_phantoms,
    load_dataset,
    load_image,
    make_folds,
    preprocess,
    write_dataset,
)
from .metrics import METRIC_NAMES, binarize, format_metrics_table
from .network import Network, build_graph, count_params, graph_from_state
from .training import (
    NonFiniteError,
    TrainingConfig,
    cross_validate,
    evaluate,
    format_history,
    format_history_row,
    predict,
    train_model,
    write_sidecar,
)

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _threads(args):
    """Limit BLAS threads; ``--verify`` pins a single thread."""
    n = 1 if args.verify else args.threads
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(field_type, value: str):
    if field_type in (bool, "bool"):
        return value.lower() in ("1", "true", "yes", "on")
    for cast in (int, float):
        if field_type in (cast, cast.__name__):
            return cast(value)
    return value


FLAG_TO_FIELD = {
    "model": "model", "loss": "loss", "lr": "lr0", "batch_size": "batch_size",
    "dropout": "dropout", "epochs": "max_epochs", "base_filters": "base_filters",
    "size": "input_size", "seed": "seed", "early_stop_patience": "early_stop_patience",
    "plateau_patience": "plateau_patience", "smoothing": "smoothing",
}


def resolve_config(args) -> TrainingConfig:
    """Defaults <- config file <- command-line flags."""
    types = {f.name: f.type for f in fields(TrainingConfig)}
    values = {}
    if args.config:
        for key, raw in read_config_file(args.config).items():
            if key not in types:
                raise UsageError(f"unknown config key {key!r}")
            values[key] = _coerce(types[key], raw)
    for flag, name in FLAG_TO_FIELD.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[name] = value
    if getattr(args, "no_flip", False):
        values["hflip"] = False
    try:
        return TrainingConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _out_dir(path) -> Path:
    if path is None:
        raise UsageError("an output directory is required (--out)")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from None
    return out


def write_manifest(out: Path, command: str, config: dict, inputs: dict, seed, extra=None) -> None:
    manifest = {
        "tool": "slimunet",
        "version": __version__,
        "command": command,
        "seed": seed,
        "inputs": inputs,
        "output_dir": str(out),
        "config": config,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_net(path, size: int) -> Network:
    try:
        state = checkpoint.load(path)
        net = Network(graph_from_state(state, size), dropout=0.0)
        net.load_state_dict(state)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    return net


# ---------------------------------------------------------------------------
# commands


def cmd_phantoms(args) -> int:
    if args.count < 1 or args.subjects < 1 or args.subjects > args.count:
        raise UsageError("--count and --subjects must be positive with subjects <= count")
    try:
        spec = PhantomSpec(count=args.count, image_size=args.size, subjects=args.subjects,
                           margin_px=args.margin, speckle=args.speckle,
                           blur_sigma=args.blur, seed=args.seed or 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args.out)
    samples, annotations = generate_phantoms(spec)
    plan = make_folds(samples, min(10, spec.subjects), spec.seed) if spec.subjects >= 2 else None
    write_dataset(out, samples, annotations, plan)
    print(f"wrote {len(samples)} phantoms to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    out = _out_dir(args.out)
    n_params = count_params(build_graph(config.model, config.base_filters)).total_trainable
    write_manifest(out, "train", config.to_dict(), {"data_dir": str(args.data_dir)},
                   config.seed, {"trainable_params": n_params})
    try:
        samples = load_dataset(args.data_dir, config.input_size)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load dataset {args.data_dir}: {exc}") from None
    history_path = out / "history.csv"
    with open(history_path, "w", newline="") as fh:
        fh.write(format_history([]))

    def log(record):
        with open(history_path, "a", newline="") as fh:
            fh.write(",".join(format_history_row(record)) + "\n")
        print(f"epoch {record.epoch:3d}  train {record.train_loss:.4f}  "
              f"val {record.val_loss:.4f}  lr {record.lr:g}  DC {record.metrics['DC']:.2f}  "
              f"{' '.join(record.events)}", file=sys.stderr)

    try:
        _, result, _ = train_model(samples, config, on_epoch=log,
                                   checkpoint_path=out / "best.sunc")
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_sidecar(out / "best.sunc.txt", config, result.best_epoch, result.best_val_loss)
    print(f"best epoch {result.best_epoch}, val loss {result.best_val_loss:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = _load_net(args.checkpoint, args.size)
    try:
        samples = load_dataset(args.data_dir, args.size)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load dataset {args.data_dir}: {exc}") from None
    config = TrainingConfig(threshold=args.threshold, input_size=args.size)
    report = evaluate(net, samples, config, pooled=args.pooled)
    table = format_metrics_table([report])
    if args.out:
        out = _out_dir(args.out)
        (out / "metrics.csv").write_text(table)
    sys.stdout.write(table)
    if args.pooled:
        print("pooled," + ",".join(f"{report.pooled[k]:.4f}" for k in METRIC_NAMES))
    return EXIT_OK


def cmd_predict(args) -> int:
    from PIL import Image

    net = _load_net(args.checkpoint, args.size)
    try:
        image = preprocess(load_image(args.image), args.size)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read image {args.image}: {exc}") from None
    prob = predict(net, image[None])[0, 0]
    out = Path(args.output)
    Image.fromarray(binarize(prob, args.threshold) * 255, mode="L").save(out)
    if args.prob:
        Image.fromarray(np.round(prob.astype(np.float64) * 255).astype(np.uint8), mode="L").save(args.prob)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_params(args) -> int:
    try:
        report = count_params(build_graph(args.model, args.base_filters, (1, args.size, args.size)))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(report.format())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(args.instances, args.seed or 0, args.network_instances)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<18} instances={r.instances:<4d} max_rel_err={r.max_error:.3e}")
    if failed:
        print(f"gradient check failed (tolerance {TOLERANCE:g}): "
              + ", ".join(r.name for r in failed))
        return EXIT_VERIFY
    return EXIT_OK


def cmd_cv(args) -> int:
    config = resolve_config(args)
    out = _out_dir(args.out)
    write_manifest(out, "cv", config.to_dict(), {"data_dir": str(args.data_dir)},
                   config.seed, {"k": args.k})
    try:
        samples = load_dataset(args.data_dir, config.input_size)
        plan = make_folds(samples, args.k, config.seed)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    try:
        result = cross_validate(samples, plan, config)
    except RuntimeError as exc:
        if isinstance(exc.__cause__, NonFiniteError):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise
    (out / "folds.csv").write_text(format_metrics_table(result.reports))
    s = result.summary
    lines = ["metric,mean,std,best_fold_value"]
    lines += [f"{k},{s.mean[k]:.4f},{s.std[k]:.4f},{s.best[k]:.4f}" for k in METRIC_NAMES]
    lines.append(f"best_fold,{s.best_fold},,")
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _train_options(p):
    p.add_argument("data_dir")
    p.add_argument("--model", choices=("slim", "std"))
    p.add_argument("--loss", choices=("d", "dj", "djb"))
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--base-filters", type=int)
    p.add_argument("--size", type=int, help="input size (default 128)")
    p.add_argument("--smoothing", type=float)
    p.add_argument("--early-stop-patience", type=int)
    p.add_argument("--plateau-patience", type=int)
    p.add_argument("--no-flip", action="store_true", help="disable horizontal-flip augmentation")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", "-o")
    common.add_argument("--config", help="key = value file, overridden by flags")
    common.add_argument("--threads", type=int, help="BLAS thread count")
    common.add_argument("--verify", action="store_true",
                        help="single-threaded deterministic mode")

    parser = argparse.ArgumentParser(prog="slimunet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantoms", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--margin", type=int, default=3, help="annotation margin in pixels")
    p.add_argument("--speckle", type=float, default=0.8)
    p.add_argument("--blur", type=float, default=1.2)
    p.set_defaults(func=cmd_phantoms)

    p = sub.add_parser("train", parents=[common], help="train one model")
    _train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--pooled", action="store_true", help="also report pooled-pixel metrics")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="segment one image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("output", help="mask PNG to write")
    p.add_argument("--prob", help="also write the probability map here")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("params", parents=[common], help="print trainable parameter counts")
    p.add_argument("--model", choices=("slim", "std"), default="slim")
    p.add_argument("--base-filters", type=int, default=32)
    p.add_argument("--size", type=int, default=128)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--network-instances", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("cv", parents=[common], help="k-fold cross-validation")
    _train_options(p)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_cv)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _threads(args):
            return args.func(args)
    except UsageError as exc:
        print(f"slimunet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
