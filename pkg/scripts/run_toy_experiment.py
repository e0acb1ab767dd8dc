#!/usr/bin/env python3
"""Noisy copy-translation experiment.

Trains a supervised baseline and a consistency-regularized model on the same
synthetic corpus, evaluates both on clean and word-dropout-corrupted test
inputs, and (optionally) sweeps the loss-weight grid. This is the runnable
version of the shipped acceptance experiment.

Usage:
    python scripts/run_toy_experiment.py --work-dir /tmp/toy --epochs 20
    python scripts/run_toy_experiment.py --work-dir /tmp/toy --with-sweep
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from crnmt.augment import AugmentConfig
from crnmt.config import DataConfig, RunConfig
from crnmt.decoding import DecodeConfig
from crnmt.filtering import FilterConfig, run_pipeline, save_examples
from crnmt.model import TransformerConfig
from crnmt.objective import LossWeights
from crnmt.pipeline import (
    evaluate_bleu, load_translator, run_lambda_sweep, run_training,
)
from crnmt.toytask import build_dataset, write_dataset
from crnmt.trainer import TrainConfig


def toy_run_config(paths: dict, work_dir: Path, name: str, lambda1: float,
                   lambda2: float, epochs: int, seed: int,
                   augmented_path: str = "") -> RunConfig:
    return RunConfig(
        model=TransformerConfig(num_blocks=1, num_heads=4, d_model=64, d_ffn=128,
                                dropout=0.1, max_positions=64),
        train=TrainConfig(epochs=epochs, max_tokens=1000, avg_last_k=min(5, epochs),
                          warmup_steps=100, lr_peak=0.002,
                          weights=LossWeights(lambda1, lambda2), seed=seed),
        decode=DecodeConfig(beam_size=1),
        data=DataConfig(train_src=paths["train_src"], train_tgt=paths["train_tgt"],
                        valid_src=paths["valid_src"], valid_tgt=paths["valid_tgt"],
                        test_src=paths["test_src"], test_tgt=paths["test_tgt"],
                        augmented=augmented_path, num_merges=80,
                        run_dir=str(work_dir / name)),
    )


def build_augmented_corpus(dataset, paths, work_dir: Path, seed: int) -> str:
    """Word-dropout augmentation pushed through the quality filter."""
    kept, report = run_pipeline(
        dataset.train,
        AugmentConfig(strategy="word_dropout", drop_p=0.2, seed=seed),
        FilterConfig(),
        dataset.provider,
    )
    out = work_dir / "augmented.tsv"
    save_examples(kept, out)
    (work_dir / "filter_report.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    logging.info("augmented corpus: %d kept of %d (%s)", len(kept), report.inputs,
                 ", ".join(f"{s['stage']}-{s['rejected']}" for s in report.stages))
    return str(out)


def run_experiment(work_dir: Path, epochs: int, seed: int, sweep_epochs: int,
                   with_sweep: bool) -> dict:
    t0 = time.time()
    dataset = build_dataset(seed=seed)
    paths = write_dataset(dataset, work_dir / "data")
    corrupted_src = paths["test_corrupted_src"]

    results = {}

    baseline_cfg = toy_run_config(paths, work_dir, "baseline", 1.0, 0.0,
                                  epochs, seed)
    run_training(baseline_cfg)
    baseline = load_translator(Path(baseline_cfg.data.run_dir) / "ckpt-avg.bin",
                               DecodeConfig(beam_size=1))
    results["baseline_clean"] = evaluate_bleu(baseline, paths["test_src"],
                                              paths["test_tgt"])
    results["baseline_corrupted"] = evaluate_bleu(baseline, corrupted_src,
                                                  paths["test_tgt"])

    augmented_path = build_augmented_corpus(dataset, paths, work_dir, seed)
    consistency_cfg = toy_run_config(paths, work_dir, "consistency", 0.5, 0.5,
                                     epochs, seed, augmented_path=augmented_path)
    run_training(consistency_cfg)
    consistency = load_translator(Path(consistency_cfg.data.run_dir) / "ckpt-avg.bin",
                                  DecodeConfig(beam_size=1))
    results["consistency_clean"] = evaluate_bleu(consistency, paths["test_src"],
                                                 paths["test_tgt"])
    results["consistency_corrupted"] = evaluate_bleu(consistency, corrupted_src,
                                                     paths["test_tgt"])

    if with_sweep:
        sweep_cfg = toy_run_config(paths, work_dir, "sweep", 0.5, 0.5,
                                   sweep_epochs, seed, augmented_path=augmented_path)
        run_lambda_sweep(sweep_cfg, work_dir / "sweep.csv")
        results["sweep_csv"] = str(work_dir / "sweep.csv")

    results["wall_seconds"] = round(time.time() - t0, 1)
    return results


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--work-dir", type=Path, required=True)
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--sweep-epochs", type=int, default=6)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--with-sweep", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    results = run_experiment(args.work_dir, args.epochs, args.seed,
                             args.sweep_epochs, args.with_sweep)
    print(json.dumps(results, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
