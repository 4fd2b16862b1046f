#!/usr/bin/env python3
"""
Demo script: prior-fit a tiny model, then compare full and local contexts on
concentric circles and fine-tune it on one task.
"""

import os
import sys
import tempfile

# Add current directory to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import ExperimentConfig
from database import DatabaseManager
from datagen import gen_circles
from experiment_runner import ExperimentRunner
from run_registry import RunRegistry


def demo():
    """Run the demo"""
    print("🧮 Local-context ICL Demo")
    print("=" * 50)

    workdir = tempfile.mkdtemp(prefix="localicl-demo-")
    db_manager = DatabaseManager(f"sqlite:///{os.path.join(workdir, 'runs.db')}")
    config = ExperimentConfig.model_validate({
        "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32, "d_max": 4, "c_max": 4, "l_ctx_max": 128},
        "prior": {"n_samples": [64, 160], "n_classes": [2, 3]},
        "prior_fit": {"mode": "prior_fit", "lr": 0.003, "weight_decay": 0.0, "batch_size": 4,
                      "eval_every": 20, "max_steps": 120},
        "train": {"n_queries": 32, "eval_every": 10, "patience": 3, "max_steps": 40},
        "eval": {"folds": 2, "bootstrap_resamples": 200, "prior_probe_tasks": 20},
        "io": {"output_dir": workdir},
        "seed": 7,
    })

    try:
        print("\n🏋️  Prior-fitting a tiny model...")
        runner = ExperimentRunner(config, os.path.join(workdir, "priorfit"), db_manager)
        manifest = runner.priorfit()
        checkpoint = os.path.join(workdir, "priorfit", "model.lcpf")
        probe = manifest.notes["prior_probe"]
        print(f"   Probe accuracy {probe['accuracy']:.3f} vs majority {probe['majority_rate']:.3f}")

        print("\n⭕ Circles sweep (pairs 1 and 3, k 10 and 50, 3 seeds)...")
        sweep = ExperimentRunner(config, os.path.join(workdir, "circles"), db_manager)
        sweep.circles_sweep(checkpoint, [1, 3], [10, 50], seeds=3, n=400)
        with open(os.path.join(workdir, "circles", "sweep.csv")) as handle:
            for line in handle.read().splitlines()[:8]:
                print(f"   {line}")

        print("\n🔧 Fine-tuning on circles with 3 pairs...")
        tuner = ExperimentRunner(config, os.path.join(workdir, "finetune"), db_manager)
        manifest = tuner.finetune(checkpoint, gen_circles(600, 3, 0.01, seed=1), "finetune_local")
        print(f"   Validation AUC {manifest.notes['initial_val_auc']:.4f} -> {manifest.notes['best_val_auc']:.4f}")

        print("\n📋 Registered runs:")
        session = db_manager.get_session()
        for run in RunRegistry(session).get_recent_runs():
            print(f"   {run.command}: {run.status} ({len(run.artifacts)} files)")
        db_manager.close_session(session)

        print(f"\n✅ Demo completed! Outputs in {workdir}")

    except Exception as e:
        print(f"❌ Demo failed: {e}")
        raise
    finally:
        db_manager.dispose()


if __name__ == "__main__":
    demo()
