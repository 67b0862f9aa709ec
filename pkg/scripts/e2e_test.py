"""Minimal end-to-end validation of the CLI pipeline on synthetic data."""

from __future__ import annotations

import shutil
import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from rose_ood.cli import main as cli_main  # noqa: E402
from rose_ood.data import gaussian_blur, gen_noise, load_idx, write_idx  # noqa: E402
from rose_ood.evaluation import auroc  # noqa: E402
from rose_ood.rose import read_score_table  # noqa: E402
from rose_ood.storage import load_checkpoint, load_fisher  # noqa: E402


def run(*argv: str) -> None:
    code = cli_main(list(argv))
    assert code == 0, f"rose {argv[0]} exited with {code}"


def main() -> None:
    tmp_root = PROJECT_ROOT / "data" / "tmp_e2e"
    if tmp_root.exists():
        shutil.rmtree(tmp_root)
    tmp_root.mkdir(parents=True, exist_ok=True)

    smooth = gaussian_blur(gen_noise(96, (16, 16), seed=1), 2.0)
    train_path = str(tmp_root / "train.idx")
    write_idx(smooth, train_path)
    run("gen", "--kind", "noise", "--n", "32", "--shape", "16x16", "--seed", "2", "--out", str(tmp_root / "noise.idx"))

    ckpt = str(tmp_root / "model.rvae")
    fisher = str(tmp_root / "fisher.rfsh")
    common = ("--precision", "float64", "-q")
    run("train", "--data", train_path, "--epochs", "2", "--channels", "4", "--latent", "4", "--out", ckpt, *common)
    run("fit", "--model", ckpt, "--data", train_path, "--n-samples", "48", "--out", fisher, *common)
    for name, data in (("in", train_path), ("noise", str(tmp_root / "noise.idx"))):
        run("score", "--model", ckpt, "--fisher", fisher, "--data", data, "--out", str(tmp_root / f"{name}.csv"), *common)
    run(
        "eval",
        "--in", str(tmp_root / "in.csv"),
        "--out", f"noise={tmp_root / 'noise.csv'}",
        "--per-layer",
        "--report", str(tmp_root / "report.csv"),
        "--histogram", str(tmp_root / "hist.csv"),
    )

    model = load_checkpoint(ckpt)
    artifact = load_fisher(fisher)
    assert artifact.fingerprint == model.fingerprint(), "Fisher artifact should match the checkpoint."
    assert artifact.layer_names == model.selected_layers, "Fisher layers should follow the model selection."
    assert artifact.stats is not None and artifact.stats.n_samples == 48, "Calibration stats should be stored."
    assert len(load_idx(train_path)) == 96, "IDX round trip should keep every image."

    in_table = read_score_table(str(tmp_root / "in.csv"))
    noise_table = read_score_table(str(tmp_root / "noise.csv"))
    assert len(in_table) == 96 and len(noise_table) == 32, "Expected one score row per image."
    assert len(in_table.layer_names) == len(model.selected_layers), "Expected one score column per layer."
    assert (tmp_root / "report.csv").read_text(encoding="utf-8").startswith("metric,dataset,value")
    assert (tmp_root / "model.loss.csv").exists(), "Training should write a loss curve."

    print(f"rose auroc (noise): {auroc(in_table.rose, noise_table.rose):.3f}")
    print("E2E PASS")


if __name__ == "__main__":
    main()
