"""Brightness robustness sweep (0.2x .. 1.8x) for an existing model and Fisher artifact."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from rose_ood.config import AppConfig  # noqa: E402
from rose_ood.data import load_dataset  # noqa: E402
from rose_ood.evaluation import write_sweep  # noqa: E402
from rose_ood.pipeline import BRIGHTNESS_GRID, RosePipeline  # noqa: E402
from rose_ood.storage import load_checkpoint, load_fisher  # noqa: E402


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="AUROC of ROSE and NLL across brightness factors.")
    parser.add_argument("--config", type=str, default=None, help="Path to YAML config.")
    parser.add_argument("--model", required=True, help="Checkpoint (.rvae).")
    parser.add_argument("--fisher", required=True, help="Fisher artifact (.rfsh).")
    parser.add_argument("--in", dest="in_data", required=True, help="In-distribution test data.")
    parser.add_argument("--ood", required=True, help="OOD data to perturb.")
    parser.add_argument("--out", type=str, default=None, help="Sweep CSV (stdout when omitted).")
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    config = AppConfig.load(args.config)
    pipeline = RosePipeline(config)
    model = load_checkpoint(args.model)
    artifact = load_fisher(args.fisher)

    in_table = pipeline.score(model, artifact, load_dataset(args.in_data))
    result = pipeline.brightness_sweep(model, artifact, in_table, load_dataset(args.ood), BRIGHTNESS_GRID)
    write_sweep(result, args.out)

    print("Brightness sweep complete.", file=sys.stderr)
    for score in result.aurocs:
        print(f"{score}: mean={result.mean(score):.4f} std={result.std(score):.4f}", file=sys.stderr)


if __name__ == "__main__":
    main()
