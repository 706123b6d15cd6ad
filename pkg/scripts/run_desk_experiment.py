#!/usr/bin/env python3
"""Desk-scale leave-one-patient-out experiment over several master seeds.

11 synthetic patients x 400+400 windows of 750 samples, the 4-block network,
30 pretraining epochs and 5 fine-tuning epochs. Each seed writes
``<out>/seed<k>/report.{csv,json}``; a seed whose stored configuration matches
is not recomputed.

    python scripts/run_desk_experiment.py --seeds 0 1 2 --out runs/desk
"""
import argparse
import json
import logging
import statistics
import time
from pathlib import Path

from soz_adapt.cohort import default_cohort_params, synth_cohort
from soz_adapt.model import SozNetConfig
from soz_adapt.pipeline import METHODS, TrainConfig, run_lopo

DESK_TRAIN = dict(epochs_pretrain=30, epochs_finetune=5, batch_size=512, lr_pretrain=1e-3, lr_finetune=1e-4,
                  subsample=1024)


def desk_setup(seed):
    cohort = synth_cohort(default_cohort_params(n_patients=11, n_windows=400, rate_hz=250, window_seconds=3.0,
                                                master_seed=seed))
    return cohort, SozNetConfig.desk(), TrainConfig(**DESK_TRAIN, seed=seed)


def _matches(stored: dict, cohort, model_cfg, train_cfg) -> bool:
    return (stored.get("cohort_fingerprint") == cohort.fingerprint()
            and stored["config"]["model"] == model_cfg.to_dict()
            and stored["config"]["train"] == json.loads(json.dumps(train_cfg.to_dict())))


def desk_run(seed: int, out: Path, force: bool = False) -> dict:
    """Report dict for one seed, reusing ``out/seed<k>`` when its configuration matches."""
    cohort, model_cfg, train_cfg = desk_setup(seed)
    d = Path(out) / f"seed{seed}"
    path = d / "report.json"
    if path.exists() and not force:
        stored = json.loads(path.read_text())
        if _matches(stored, cohort, model_cfg, train_cfg):
            return stored
    t0 = time.perf_counter()
    report = run_lopo(cohort, model_cfg, train_cfg, METHODS)
    report.extras["wall_seconds"] = round(time.perf_counter() - t0, 1)
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.csv").write_text(report.to_csv())
    path.write_text(report.to_json())
    return json.loads(report.to_json())


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--force", action="store_true", help="recompute even when a matching report exists")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    gains = []
    for seed in args.seeds:
        rep = desk_run(seed, Path(args.out), args.force)
        means = rep["means"]
        gains.append({m: means[m] - means["Standard"] for m in ("Multiscale", "RBF")})
        print(f"seed {seed}: " + ", ".join(f"{m} {v:.2f}" for m, v in means.items())
              + f" ({rep['wall_seconds'] / 60:.1f} min)", flush=True)
    for m in ("Multiscale", "RBF"):
        print(f"median gain {m}: {statistics.median(g[m] for g in gains):+.2f}")


if __name__ == "__main__":
    main()
