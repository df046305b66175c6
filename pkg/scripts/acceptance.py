#!/usr/bin/env python3
"""
Long-running acceptance checks

    overfit   the 20-user / 10-POI correlation-1 synthetic fixture must reach
              test Hits@1 >= 0.95 within 200 sequential epochs
    ablation  on a correlated synthetic corpus the full model's NDCG@10 must
              stay within 0.02 of every single-channel variant, for 3 seeds

Both take minutes on one core, so they are not part of the default test run.
"""

import sys
import time
from pathlib import Path

import structlog

# Add parent directory to path to import our modules
sys.path.insert(0, str(Path(__file__).parent.parent))

from models.models import SynthSpec
from models.synthetic import synth_corpus
from services.pipeline import run_ablation, train_pipeline
from utils.config import RunConfig, build_run_config, validate_startup_config
from utils.seeding import SeedUtils

logger = structlog.get_logger(__name__)

OVERFIT_SPEC = SynthSpec(num_users=20, num_pois=10, correlation=1.0)
OVERFIT_SEED = 7
OVERFIT_HITS1 = 0.95

ABLATION_SPEC = SynthSpec(num_users=200, num_pois=60, num_app_categories=8, num_poi_categories=8,
                          seq_len=30, correlation=0.8, route_length=6)
ABLATION_SEEDS = 3
ABLATION_MARGIN = 0.02


def overfit_config(**changes) -> RunConfig:
    values = dict(
        dim=32, seq_len=20, num_blocks=2, heads=1, clip_app=16, clip_poi=16, clip_time=16,
        epochs_ei=20, epochs_sr=200, lr_sr=0.005, dropout=0.0, batch_size=32, seed=OVERFIT_SEED,
        eval_negatives=100, pretrained_dim=32,
    )
    values.update(changes)
    return build_run_config(values)


def ablation_config(**changes) -> RunConfig:
    values = dict(
        dim=32, seq_len=30, num_blocks=2, heads=2, clip_app=16, clip_poi=16, clip_time=16,
        epochs_ei=20, epochs_sr=60, lr_sr=0.002, dropout=0.2, batch_size=64, seed=11,
        eval_negatives=50, pretrained_dim=32,
    )
    values.update(changes)
    return build_run_config(values)


def check_overfit(epochs: int | None = None) -> bool:
    """Train on the overfit fixture and compare test Hits@1 with the threshold"""
    config = overfit_config() if epochs is None else overfit_config(epochs_sr=epochs)
    corpus = synth_corpus(OVERFIT_SPEC, OVERFIT_SEED)
    started = time.perf_counter()
    result = train_pipeline(corpus, config)
    hits1 = result.test_report.metric("hits", 1)
    elapsed = time.perf_counter() - started
    print(f"overfit: test Hits@1 = {hits1:.4f} (best epoch {result.best_epoch}, {elapsed:.0f}s)")
    return hits1 >= OVERFIT_HITS1


def check_ablation_ordering(seeds: int = ABLATION_SEEDS) -> bool:
    """Full model vs the single-channel variants, seed by seed"""
    ok = True
    for run, seed in enumerate(SeedUtils.run_seeds(ABLATION_SPEC.num_users, seeds), 1):
        corpus = synth_corpus(ABLATION_SPEC, seed)
        result = run_ablation(corpus, ablation_config(seed=seed), "relative", runs=1)
        ndcg = {r.variant: r.test_report.metric("ndcg", 10) for r in result.results}
        for variant in ("-t", "-a", "-l"):
            passed = ndcg["full"] >= ndcg[variant] - ABLATION_MARGIN
            ok = ok and passed
            print(f"ablation run {run} (seed {seed}): full {ndcg['full']:.4f} vs {variant} "
                  f"{ndcg[variant]:.4f} {'ok' if passed else 'FAILED'}")
    return ok


def main():
    """Main function for command line usage"""
    import argparse

    parser = argparse.ArgumentParser(description="Run the long acceptance checks")
    parser.add_argument("--check", choices=["overfit", "ablation", "all"], default="all")
    parser.add_argument("--seeds", type=int, default=ABLATION_SEEDS, help="seeds for the ablation check")
    parser.add_argument("--epochs", type=int, default=None, help="override SR epochs for the overfit check")

    args = parser.parse_args()

    try:
        validate_startup_config()
    except Exception as e:
        print(f"Configuration error: {e}")
        return 1

    results = {}
    if args.check in ("overfit", "all"):
        results["overfit"] = check_overfit(args.epochs)
    if args.check in ("ablation", "all"):
        results["ablation"] = check_ablation_ordering(args.seeds)

    for name, passed in results.items():
        print(f"{name}: {'PASS' if passed else 'FAIL'}")
    logger.info("acceptance_done", **results)
    return 0 if all(results.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
