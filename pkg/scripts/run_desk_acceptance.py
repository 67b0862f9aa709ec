"""Desk-scale empirical checks on Fashion-MNIST (in) vs MNIST (out).

Trains the default VAE on 10k Fashion-MNIST training images, fits EKFAC on
2000 of them and scores 1000 test images of each set, then checks separation,
synthetic OOD detection, Fisher sample-count and brightness robustness, and
DIAG vs EKFAC. Exits non-zero when any check fails.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import List, Tuple

import numpy as np

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from rose_ood.config import AppConfig  # noqa: E402
from rose_ood.data import gen_constant, gen_noise, load_idx, take_random  # noqa: E402
from rose_ood.evaluation import auroc  # noqa: E402
from rose_ood.pipeline import BRIGHTNESS_GRID, RosePipeline  # noqa: E402
from rose_ood.vae import reconstruct  # noqa: E402


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Run the desk-scale FMNIST/MNIST acceptance checks.")
    parser.add_argument("--config", type=str, default=None, help="Path to YAML config.")
    parser.add_argument("--fmnist-train", required=True, help="Fashion-MNIST train-images IDX file.")
    parser.add_argument("--fmnist-test", required=True, help="Fashion-MNIST t10k-images IDX file.")
    parser.add_argument("--mnist-test", required=True, help="MNIST t10k-images IDX file.")
    parser.add_argument("--workdir", type=str, default=str(PROJECT_ROOT / "artifacts" / "desk"))
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--n-train", type=int, default=10_000)
    parser.add_argument("--n-fisher", type=int, default=2000)
    parser.add_argument("--n-test", type=int, default=1000)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--seed", type=int, default=0)
    return parser.parse_args()


def main() -> int:
    args = parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    checks: List[Tuple[str, bool, str]] = []

    config = AppConfig.load(
        args.config,
        {
            "paths": {"artifacts_dir": args.workdir},
            "train": {"epochs": args.epochs, "seed": args.seed},
            "runtime": {"seed": args.seed},
        },
    )
    train_set = take_random(load_idx(args.fmnist_train, label="fmnist"), args.n_train, seed=args.seed)
    in_test = take_random(load_idx(args.fmnist_test, label="fmnist"), args.n_test, seed=args.seed + 1)
    mnist = take_random(load_idx(args.mnist_test, label="mnist"), args.n_test, seed=args.seed + 2)
    config.model.input_shape = train_set.sample_shape
    pipeline = RosePipeline(config, threads=args.threads)

    model, curve = pipeline.train(train_set)
    recon = reconstruct(model, in_test.images[:256])
    print(f"training loss: {curve[0].loss:.2f} -> {curve[-1].loss:.2f}")
    print(f"reconstruction mean abs error: {float(np.mean(np.abs(recon - in_test.images[:256]))):.4f}")

    artifact = pipeline.fit(model, train_set, n_samples=args.n_fisher, method="ekfac")
    in_table = pipeline.score(model, artifact, in_test)
    mnist_table = pipeline.score(model, artifact, mnist)
    rose_mnist = auroc(in_table.rose, mnist_table.rose)
    nll_mnist = auroc(in_table.nll, mnist_table.nll)
    checks.append(("fmnist->mnist nll auroc < 0.5", nll_mnist < 0.5, f"{nll_mnist:.3f}"))
    checks.append(("fmnist->mnist rose auroc >= 0.90", rose_mnist >= 0.90, f"{rose_mnist:.3f}"))

    shape = in_test.sample_shape
    for name, make in (("noise", gen_noise), ("constant", gen_constant)):
        table = pipeline.score(model, artifact, make(args.n_test, shape, seed=args.seed + 3))
        value = auroc(in_table.rose, table.rose)
        checks.append((f"{name} rose auroc >= 0.95", value >= 0.95, f"{value:.3f}"))

    small = pipeline.fit(model, train_set, n_samples=100, method="ekfac")
    rose_small = auroc(pipeline.score(model, small, in_test).rose, pipeline.score(model, small, mnist).rose)
    gap = abs(rose_small - rose_mnist)
    checks.append(("|auroc(N=100) - auroc(N=2000)| < 0.05", gap < 0.05, f"{rose_small:.3f} vs {rose_mnist:.3f}"))

    sweep = pipeline.brightness_sweep(model, artifact, in_table, mnist, BRIGHTNESS_GRID)
    rose_std, nll_std = sweep.std("rose"), sweep.std("nll")
    worst = min(float(np.mean(point)) for point in sweep.aurocs["rose"])
    checks.append(("brightness std(rose) < std(nll)", rose_std < nll_std, f"{rose_std:.3f} vs {nll_std:.3f}"))
    checks.append(("brightness rose auroc > 0.5 everywhere", worst > 0.5, f"min {worst:.3f}"))

    diag = pipeline.fit(model, train_set, n_samples=args.n_fisher, method="diag")
    rose_diag = auroc(pipeline.score(model, diag, in_test).rose, pipeline.score(model, diag, mnist).rose)
    checks.append(("ekfac >= diag - 0.02", rose_mnist >= rose_diag - 0.02, f"{rose_mnist:.3f} vs {rose_diag:.3f}"))

    print("== Desk acceptance ==")
    for name, passed, detail in checks:
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    print(f"runtime: {(time.perf_counter() - started) / 60.0:.1f} min")
    return 0 if all(passed for _, passed, _ in checks) else 1


if __name__ == "__main__":
    sys.exit(main())
