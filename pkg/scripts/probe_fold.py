#!/usr/bin/env python3
"""Single-fold probe for picking learning rates and checking the synthetic design.

For each held-out patient: pretrain at desk scale, print per-patient accuracy,
the weight mass each kernel puts on every discharge cluster, and held-out
accuracy after weighted and unweighted fine-tuning at each fine-tune lr.

    python scripts/probe_fold.py --test P02 P04 --lr-pretrain 1e-3 --lr-finetune 1e-4 5e-4
"""
import argparse
import time

from soz_adapt.cohort import default_cohort_params, synth_cohort
from soz_adapt.mmd import compute_weight_table
from soz_adapt.model import SozNetConfig
from soz_adapt.pipeline import KERNELS, TrainConfig, evaluate, featurize_cohort, finetune, fold_seed, pretrain


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--test", nargs="+", default=["P02"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr-pretrain", type=float, default=1e-3)
    p.add_argument("--lr-finetune", type=float, nargs="+", default=[1e-4])
    args = p.parse_args()

    cohort = synth_cohort(default_cohort_params(master_seed=args.seed))
    cluster = {r.patient_id: r.metadata["discharge_profile"] for r in cohort}
    n_clusters = max(cluster.values()) + 1
    for test_id in args.test:
        train, test = cohort.without(test_id), cohort.get(test_id)
        seed = fold_seed(args.seed, test_id)
        cfg = TrainConfig(epochs_pretrain=args.epochs, lr_pretrain=args.lr_pretrain, seed=args.seed)
        t0 = time.perf_counter()
        net = pretrain(train, SozNetConfig.desk(), cfg, seed)
        print(f"{test_id} (cluster {cluster[test_id]}): pretrained in {time.perf_counter() - t0:.0f}s, "
              f"final loss {net.provenance['loss_curve'][-1]:.3f}", flush=True)
        print("  accuracy " + " ".join(f"{r.patient_id}={evaluate(net, r).accuracy:.1f}" for r in cohort))
        train_feats = featurize_cohort(net, list(train))
        test_feats = featurize_cohort(net, [test.unlabeled()])[0]
        tables = {m: compute_weight_table(train_feats, test_feats, k, cfg.subsample, seed) for m, k in KERNELS.items()}
        for m, table in tables.items():
            mass = [sum(e.weight for e in table.entries if cluster[e.patient_id] == c) for c in range(n_clusters)]
            print(f"  {m} weight mass by cluster " + " ".join(f"{v:.2f}" for v in mass))
        for lr in args.lr_finetune:
            ft_cfg = TrainConfig(lr_finetune=lr, seed=args.seed)
            scores = {m: evaluate(finetune(net, train, t, ft_cfg, seed), test).accuracy for m, t in tables.items()}
            scores["unweighted"] = evaluate(finetune(net, train, None, ft_cfg, seed), test).accuracy
            print(f"  lr {lr:g}: " + " ".join(f"{m}={v:.2f}" for m, v in scores.items()), flush=True)


if __name__ == "__main__":
    main()
