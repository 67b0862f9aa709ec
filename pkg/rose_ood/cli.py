"""Command-line front end: train, fit, score, eval, perturb, gen, mix, sweep."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .config import AppConfig, parse_norm_order
from .data import (
    brightness,
    gaussian_blur,
    gen_constant,
    gen_noise,
    load_dataset,
    load_idx,
    load_manifest,
    parse_shape,
    provenance_rows,
    replace_random,
    write_idx,
)
from .errors import EXIT_OK, RoseError, UsageError
from .evaluation import (
    SCORE_COLUMNS,
    evaluate,
    histogram,
    overall_mix,
    write_histogram,
    write_report,
    write_sweep,
)
from .pipeline import BRIGHTNESS_GRID, RosePipeline
from .rose import read_score_table, score_pipeline, write_score_table
from .storage import load_checkpoint, load_fisher

logger = logging.getLogger("rose_ood")

METRICS = ("auroc", "auprc", "fpr80")


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage problems as UsageError (exit 1)."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _norm_order(text: str) -> float:
    try:
        return parse_norm_order(text)
    except RoseError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="Path to YAML config.")
    common.add_argument("--seed", type=int, default=None, help="Run seed (overrides runtime.seed).")
    common.add_argument("--threads", type=int, default=None, help="Worker threads (default: $ROSE_THREADS or 1).")
    common.add_argument("--precision", choices=("float32", "float64"), default=None)
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings only.")

    parser = _Parser(prog="rose", description="Fisher-normalized score gradients for OOD detection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="Train the VAE and write a checkpoint.")
    p.add_argument("--data", required=True, help="IDX file or label=path manifest.")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--latent", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--iwae-k", type=int, default=None)
    p.add_argument("--out", required=True, help="Checkpoint path.")

    p = sub.add_parser("fit", parents=[common], help="Fit Fisher factors and calibration statistics.")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("ekfac", "diag"), default=None)
    p.add_argument("--n-samples", type=int, default=None)
    p.add_argument("--damping-rel", type=float, default=None)
    p.add_argument("--iwae-k", type=int, default=None)
    p.add_argument("--eig-solver", choices=("jacobi", "lapack"), default=None)
    p.add_argument("--calibration-split", type=float, default=None)
    p.add_argument("--out", required=True, help="Fisher artifact path.")

    p = sub.add_parser("score", parents=[common], help="Score a dataset into a CSV table.")
    p.add_argument("--model", required=True)
    p.add_argument("--fisher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--p", type=_norm_order, default=None, help="Norm order: 1, 2 or inf (default inf).")
    p.add_argument("--beta", type=_floats, default=None, help="Per-layer offsets, comma separated.")
    p.add_argument("--iwae-k", type=int, default=None)
    p.add_argument("--nll-k", type=int, default=None)
    p.add_argument("--out", required=True, help="Score table CSV.")

    p = sub.add_parser("eval", parents=[common], help="Detection metrics from score tables.")
    p.add_argument("--in", dest="in_table", required=True, help="In-distribution score table.")
    p.add_argument("--out", dest="out_tables", action="append", required=True, help="OOD table, [label=]path.")
    p.add_argument("--metrics", default=",".join(METRICS), help="Subset of auroc,auprc,fpr80.")
    p.add_argument("--score", choices=SCORE_COLUMNS + ("both",), default="both")
    p.add_argument("--per-layer", action="store_true", help="Add per-layer AUROC rows.")
    p.add_argument("--report", default=None, help="Report CSV (stdout when omitted).")
    p.add_argument("--histogram", default=None, help="Histogram CSV of the first OOD table.")

    p = sub.add_parser("perturb", parents=[common], help="Apply a perturbation to an IDX dataset.")
    p.add_argument("--data", required=True)
    kind = p.add_mutually_exclusive_group(required=True)
    kind.add_argument("--brightness", type=float)
    kind.add_argument("--replace-ratio", type=float)
    kind.add_argument("--blur", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen", parents=[common], help="Generate a synthetic OOD dataset.")
    p.add_argument("--kind", choices=("noise", "constant"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--shape", type=str, default="28x28", help="HxW or CxHxW.")
    p.add_argument("--out", required=True)

    p = sub.add_parser("mix", parents=[common], help="Build the overall OOD set from a manifest.")
    p.add_argument("--manifest", required=True)
    p.add_argument("--n", type=int, required=True, help="Samples per source.")
    p.add_argument("--out", required=True)
    p.add_argument("--provenance", default=None, help="CSV of row,source (default: <out>.sources.csv).")

    p = sub.add_parser("sweep", parents=[common], help="Robustness sweep over brightness or Fisher sample count.")
    p.add_argument("--axis", choices=("brightness", "fisher_samples"), required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--fisher", help="Fisher artifact (brightness axis).")
    p.add_argument("--train", help="Training data to fit from (fisher_samples axis).")
    p.add_argument("--in", dest="in_data", required=True, help="In-distribution test data.")
    p.add_argument("--ood", required=True, help="OOD data.")
    p.add_argument("--grid", type=_floats, default=None)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", default=None, help="Sweep CSV (stdout when omitted).")
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def _load_config(args: argparse.Namespace) -> AppConfig:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    overrides: Dict[str, Dict[str, object]] = {
        "runtime": {"seed": get("seed"), "threads": get("threads"), "precision": get("precision")},
        "model": {"latent_dim": get("latent"), "channels": get("channels")},
        "train": {
            "epochs": get("epochs"),
            "seed": get("seed"),
            "batch_size": get("batch_size"),
            "learning_rate": get("lr"),
        },
        "fisher": {
            "method": get("method"),
            "n_samples": get("n_samples"),
            "damping_rel": get("damping_rel"),
            "eig_solver": get("eig_solver"),
            "calibration_split": get("calibration_split"),
        },
        "score": {"p": get("p"), "beta": get("beta"), "nll_k": get("nll_k")},
    }
    if args.command == "train":
        overrides["train"]["iwae_k"] = get("iwae_k")
    elif args.command == "fit":
        overrides["fisher"]["iwae_k"] = get("iwae_k")
    elif args.command == "score":
        overrides["score"]["iwae_k"] = get("iwae_k")
    return AppConfig.load(args.config, overrides)


def _cmd_train(args: argparse.Namespace, config: AppConfig) -> None:
    dataset = load_dataset(args.data)
    config.model.input_shape = dataset.sample_shape
    pipeline = RosePipeline(config)
    _, curve = pipeline.train(dataset, out=args.out)
    print("Training complete.")
    print(f"epochs: {len(curve) - 1}")
    print(f"loss_epoch0: {curve[0].loss:.4f}")
    print(f"loss_final: {curve[-1].loss:.4f}")


def _cmd_fit(args: argparse.Namespace, config: AppConfig) -> None:
    pipeline = RosePipeline(config)
    model = load_checkpoint(args.model)
    artifact = pipeline.fit(model, load_dataset(args.data), out=args.out)
    print("Fit complete.")
    print(f"method: {artifact.method}")
    for i, name in enumerate(artifact.layer_names):
        print(f"{name}: mu={artifact.stats.mu[i]:.6g} sigma={artifact.stats.sigma[i]:.6g}")


def _cmd_score(args: argparse.Namespace, config: AppConfig) -> None:
    pipeline = RosePipeline(config)
    model = load_checkpoint(args.model)
    artifact = load_fisher(args.fisher)
    dataset = load_dataset(args.data)
    before = model.samples_backpropagated
    started = time.perf_counter()
    table = score_pipeline(
        model, artifact, None, dataset, config.score, seed=pipeline.seed, threads=pipeline.threads
    )
    elapsed = time.perf_counter() - started
    write_score_table(table, args.out)
    print(f"scored: {len(table)}")
    print(f"throughput: {len(table) / elapsed if elapsed > 0 else float('inf'):.1f} images/sec")
    logger.debug("backward passes: %d for %d sample(s)", model.samples_backpropagated - before, len(table))


def _labelled(entry: str) -> tuple:
    label, sep, path = entry.partition("=")
    if sep and label and path:
        return label, path
    return Path(entry).stem, entry


def _cmd_eval(args: argparse.Namespace, config: AppConfig) -> None:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(metrics) - set(METRICS)
    if unknown or not metrics:
        raise UsageError(f"--metrics must be a subset of {','.join(METRICS)}, got {args.metrics!r}")
    scores = SCORE_COLUMNS if args.score == "both" else (args.score,)

    in_table = read_score_table(args.in_table)
    sources: Dict[str, str] = {}
    for label, path in map(_labelled, args.out_tables):
        if label in sources:
            raise UsageError(f"duplicate --out label {label!r}; use label=path to tell the tables apart")
        sources[label] = path
    out_tables = {label: read_score_table(path) for label, path in sources.items()}
    results = []
    for label, table in out_tables.items():
        for score in scores:
            per_layer = args.per_layer and score == "rose"
            results.append(evaluate(in_table, table, score=score, dataset=label, per_layer=per_layer))
    write_report(results, args.report, metrics)
    if args.histogram:
        label, table = next(iter(out_tables.items()))
        write_histogram(histogram(in_table.column(scores[0]), table.column(scores[0])), args.histogram)


def _cmd_perturb(args: argparse.Namespace, config: AppConfig) -> None:
    dataset = load_idx(args.data)
    if args.brightness is not None:
        result = brightness(dataset, args.brightness)
    elif args.replace_ratio is not None:
        result = replace_random(dataset, args.replace_ratio, seed=config.runtime.seed)
    else:
        result = gaussian_blur(dataset, args.blur)
    digest = write_idx(result, args.out)
    print(f"wrote {len(result)} image(s) to {args.out} (sha256 {digest[:16]})")


def _cmd_gen(args: argparse.Namespace, config: AppConfig) -> None:
    shape = parse_shape(args.shape)
    make = gen_noise if args.kind == "noise" else gen_constant
    dataset = make(args.n, shape, seed=config.runtime.seed)
    digest = write_idx(dataset, args.out)
    print(f"wrote {len(dataset)} {args.kind} image(s) to {args.out} (sha256 {digest[:16]})")


def _cmd_mix(args: argparse.Namespace, config: AppConfig) -> None:
    mixed = overall_mix(load_manifest(args.manifest), args.n, seed=config.runtime.seed)
    write_idx(mixed, args.out)
    provenance = args.provenance or str(Path(args.out).with_suffix(".sources.csv"))
    with open(provenance, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "source"])
        writer.writerows(provenance_rows(mixed))
    print(f"wrote {len(mixed)} image(s) to {args.out}; provenance in {provenance}")


def _cmd_sweep(args: argparse.Namespace, config: AppConfig) -> None:
    pipeline = RosePipeline(config)
    model = load_checkpoint(args.model)
    in_data = load_dataset(args.in_data)
    ood = load_dataset(args.ood)
    if args.axis == "brightness":
        if not args.fisher:
            raise UsageError("--axis brightness needs --fisher")
        artifact = load_fisher(args.fisher)
        in_table = pipeline.score(model, artifact, in_data)
        result = pipeline.brightness_sweep(model, artifact, in_table, ood, args.grid or BRIGHTNESS_GRID)
    else:
        if not args.train:
            raise UsageError("--axis fisher_samples needs --train")
        grid = [int(v) for v in (args.grid or (100, 2000))]
        result = pipeline.fisher_samples_sweep(
            model, load_dataset(args.train), in_data, ood, grid, repeats=args.repeats
        )
    write_sweep(result, args.out)
    for score in result.aurocs:
        print(f"{score}: mean={result.mean(score):.4f} std={result.std(score):.4f}", file=sys.stderr)


COMMANDS = {
    "train": _cmd_train,
    "fit": _cmd_fit,
    "score": _cmd_score,
    "eval": _cmd_eval,
    "perturb": _cmd_perturb,
    "gen": _cmd_gen,
    "mix": _cmd_mix,
    "sweep": _cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return exc.exit_code
    _configure_logging(args)
    try:
        config = _load_config(args)
        COMMANDS[args.command](args, config)
    except RoseError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
