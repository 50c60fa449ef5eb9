#!/usr/bin/env python3
"""Desk-scale reproductions: MNIST accuracy of RBF vs FC heads, attack success, entropy detector.

Needs the four MNIST IDX files (gzip is fine):

    python scripts/desk_experiments.py --data ~/mnist

Trains on the full 60k/10k split by default, which takes a while on a laptop;
pass --train-limit / --test-limit for a quicker look. Not part of the unit suite.
Ends with a PASS/FAIL verdict per acceptance check.
"""

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

# Add src directory to path
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "src"))

from adversarial import AttackConfig, attack_batch, paired_l2_comparison, summarize_attacks  # noqa: E402
from datasets import load_idx  # noqa: E402
from explain_detect import TauPolicy, detection_pipeline  # noqa: E402
from model import Classifier, ModelConfig  # noqa: E402
from rbf_head import KernelConfig  # noqa: E402
from settings import configure_logging  # noqa: E402
from trainer import TrainConfig, evaluate, train  # noqa: E402

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

# acceptance thresholds
MIN_RBF_ACCURACY = 0.97
MIN_FGSM_FLIP_RATE = 0.5
MIN_AUC = 0.65
MAX_WELCH_P = 0.01
MIN_DEEPFOOL_WIN_RATE = 0.7


def find(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise SystemExit(f"❌ {name}(.gz) not found in {directory}")


def load_mnist(directory: Path, split: str, limit):
    images, labels = MNIST_FILES[split]
    return load_idx(find(directory, images), find(directory, labels), split).subset(limit)


def train_heads(train_set, test_set, epochs: int, seed: int, trace_cluster: int, out: Path):
    """One quadratic-kernel RBF model and one plain FC model on the same backbone."""
    models, accuracy = {}, {}
    for head in ("rbf", "fc"):
        config = ModelConfig(head=head, kernel=KernelConfig(kind="quadratic", sigma=1.0))
        model = Classifier.build(config, np.random.default_rng(seed))
        train_config = TrainConfig(
            epochs=epochs, seed=seed, lam=0.1 if head == "rbf" else 0.0,
            trace_cluster=trace_cluster if head == "rbf" else None,
        )
        started = time.time()
        result = train(model, train_set, train_config, test_set)
        result.report.write_csv(out / f"train_{head}.csv")
        if head == "rbf":
            result.report.write_trace_csv(out / "center_trace.csv")
        print(f"• {head}: best test accuracy {result.best_test_acc:.4f} "
              f"(epoch {result.best_epoch}, {time.time() - started:.0f}s)")
        models[head] = model
        accuracy[head] = result.best_test_acc
    return models, accuracy


def correctly_classified(model, dataset, count: int):
    """First `count` test samples the model gets right."""
    hits = np.flatnonzero(model.predict(dataset.images) == dataset.labels)[:count]
    return dataset.images[hits], dataset.labels[hits]


def attack_table(models, test_set, count: int, threads: int) -> pd.DataFrame:
    configs = [
        AttackConfig(attack="fgsm", epsilon=0.1),
        AttackConfig(attack="fgsm", epsilon=0.25),
        AttackConfig(attack="gradient", step=1.0),
        AttackConfig(attack="deepfool"),
    ]
    rows = []
    for head, model in models.items():
        images, labels = correctly_classified(model, test_set, count)
        for config in configs:
            results, _ = attack_batch(model, images, labels, config, threads=threads, skip_failures=True)
            rows.append({"head": head, "attack": config.attack, "strength": config.strength,
                         **summarize_attacks(results)})
    return pd.DataFrame(rows)


def verdict(name: str, passed: bool, detail: str) -> bool:
    print(f"{'✅ PASS' if passed else '❌ FAIL'}  {name}: {detail}")
    return passed


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--data", required=True, type=Path, help="directory with the MNIST IDX files")
    parser.add_argument("--train-limit", type=int, default=None, help="first N training samples (default all)")
    parser.add_argument("--test-limit", type=int, default=None, help="first N test samples (default all)")
    parser.add_argument("--attack-count", type=int, default=500, help="correctly classified samples attacked")
    parser.add_argument("--detect-count", type=int, default=500, help="clean/adversarial pairs scored")
    parser.add_argument("--paired-count", type=int, default=50, help="samples in the DeepFool vs FGSM comparison")
    parser.add_argument("--epochs", type=int, default=5)
    parser.add_argument("--trace-cluster", type=int, default=0, help="center traced during RBF training")
    parser.add_argument("--threads", type=int, default=4)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=Path("desk_results"))
    args = parser.parse_args()

    configure_logging("WARNING")
    args.out.mkdir(parents=True, exist_ok=True)
    train_set = load_mnist(args.data, "train", args.train_limit)
    test_set = load_mnist(args.data, "test", args.test_limit)

    print("\n🧠 ACCURACY: RBF vs FC head")
    print("=" * 50)
    models, accuracy = train_heads(train_set, test_set, args.epochs, args.seed, args.trace_cluster, args.out)
    for head, model in models.items():
        print(f"• {head}: final test accuracy {evaluate(model, test_set).accuracy:.4f}")

    print("\n\n⚔️ ATTACKS (correctly classified samples)")
    print("=" * 50)
    table = attack_table(models, test_set, args.attack_count, args.threads)
    table.to_csv(args.out / "attacks.csv", index=False)
    print(table[["head", "attack", "strength", "count", "success_rate", "mean_gt_conf_after",
                 "mean_target_conf_after"]].to_string(index=False))

    print("\n\n📏 DEEPFOOL vs SMALLEST FLIPPING FGSM (L2)")
    print("=" * 50)
    rbf = models["rbf"]
    images, labels = correctly_classified(rbf, test_set, args.paired_count)
    paired = paired_l2_comparison(rbf, images, labels, max_iter=50)
    paired.to_csv(args.out / "paired_l2.csv", index=False)
    matched = paired[paired["deepfool_success"] & paired["fgsm_success"]]
    print(f"• {len(matched)}/{len(paired)} samples flipped by both; "
          f"median L2 deepfool {matched['deepfool_l2'].median():.4f}, fgsm {matched['fgsm_l2'].median():.4f}")

    print("\n\n🔍 ENTROPY DETECTOR (FGSM, eps 0.25, tau at 99th clean percentile)")
    print("=" * 50)
    summaries = {}
    for head, model in models.items():
        images, labels = correctly_classified(model, test_set, args.detect_count)
        report = detection_pipeline(model, images, labels, AttackConfig(epsilon=0.25),
                                    TauPolicy(percentile=99.0), threads=args.threads)
        summary = report.summary()
        summaries[head] = summary
        pd.DataFrame([summary]).to_csv(args.out / f"detection_{head}.csv", index=False)
        print(f"• {head}: AUC {summary['auc']:.4f}  clean S̄ {summary['clean_mean']:.4f}  "
              f"adv S̄ {summary['adv_mean']:.4f}  Welch p {summary['welch_p']:.3g}  recall {summary['recall']:.3f}")

    print("\n\n🧾 VERDICTS")
    print("=" * 50)
    fgsm_rate = table.query("head == 'rbf' and attack == 'fgsm' and strength == 0.25")["success_rate"].iloc[0]
    win_rate = float(paired["deepfool_smaller"].mean()) if len(paired) else float("nan")
    detection = summaries["rbf"]
    checks = [
        verdict("RBF accuracy", accuracy["rbf"] >= MIN_RBF_ACCURACY,
                f"{accuracy['rbf']:.4f} within {args.epochs} epochs (FC {accuracy['fc']:.4f}), need >= {MIN_RBF_ACCURACY}"),
        verdict("FGSM eps 0.25 flips", fgsm_rate >= MIN_FGSM_FLIP_RATE,
                f"{fgsm_rate:.3f} of correctly classified samples, need >= {MIN_FGSM_FLIP_RATE}"),
        verdict("DeepFool smaller L2", win_rate >= MIN_DEEPFOOL_WIN_RATE,
                f"{win_rate:.3f} of {len(paired)} samples, need >= {MIN_DEEPFOOL_WIN_RATE}"),
        verdict("Detector AUC", detection["auc"] >= MIN_AUC, f"{detection['auc']:.4f}, need >= {MIN_AUC}"),
        verdict("Welch t-test", detection["welch_p"] < MAX_WELCH_P,
                f"p = {detection['welch_p']:.3g}, need < {MAX_WELCH_P}"),
    ]
    print(f"\n{'✅' if all(checks) else '⚠️'} {sum(checks)}/{len(checks)} checks passed; results written to {args.out}")
    return 0 if all(checks) else 1


if __name__ == "__main__":
    sys.exit(main())
