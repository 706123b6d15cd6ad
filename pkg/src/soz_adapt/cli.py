"""Command-line entry point: ``soz-adapt <subcommand> [options]``.

Exit codes: 0 ok, 2 configuration error, 3 data integrity error, 4 fold failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .cohort import CohortError, default_cohort_params, load_cohort, save_cohort, synth_cohort
from .mmd import KernelSpec, WeightTable, compute_weight_table
from .model import (CheckpointError, ConfigError, SozNetConfig, StageMismatchError, load_checkpoint,
                    load_features, save_checkpoint, save_features)
from .pipeline import (KERNELS, METHODS, FoldError, TrainConfig, evaluate, featurize_cohort, finetune,
                       fold_seed, pretrain, run_lopo)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_FOLD = 0, 2, 3, 4

log = logging.getLogger("soz_adapt")


@dataclass
class RunConfig:
    """Everything a run depends on; a snapshot is embedded in every artifact."""
    seed: int = 0
    scale: str = "desk"
    patients: int = 11
    windows: int = 400  # per class
    rate_hz: int = 250
    window_seconds: float = 3.0
    model: Optional[dict] = None  # SozNetConfig fields; derived from the cohort when absent
    train: dict = field(default_factory=dict)
    kernels: dict = field(default_factory=dict)

    SCALES = {"desk": (400, 250), "full": (4640, 1000)}

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    def with_scale(self, scale: str) -> "RunConfig":
        if scale not in self.SCALES:
            raise ConfigError(f"unknown scale {scale!r}")
        windows, rate = self.SCALES[scale]
        return replace(self, scale=scale, windows=windows, rate_hz=rate)

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**{**self.train, "seed": self.seed})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad train config: {exc}") from exc

    def model_config(self, window_len: int) -> SozNetConfig:
        try:
            if self.model is not None:
                cfg = SozNetConfig.from_dict(self.model)
            elif window_len == SozNetConfig().input_length:
                cfg = SozNetConfig()
            else:
                cfg = SozNetConfig.desk(window_len)
            cfg.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad model config: {exc}") from exc
        if cfg.input_length != window_len:
            raise ConfigError(f"model input length {cfg.input_length} != cohort window length {window_len}")
        return cfg

    def kernel_specs(self) -> dict:
        try:
            return {**KERNELS, **{m: KernelSpec.from_dict(d) for m, d in self.kernels.items()}}
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad kernel config: {exc}") from exc

    def snapshot(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _read_checkpoint(path):
    try:
        return load_checkpoint(Path(path).read_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


def _fold(cohort, patient_id):
    if patient_id not in cohort.patient_ids:
        raise ConfigError(f"patient {patient_id!r} not in cohort {cohort.patient_ids}")
    return cohort.without(patient_id), cohort.get(patient_id)


def cmd_synth(args, rc: RunConfig) -> int:
    if args.scale:
        rc = rc.with_scale(args.scale)
    for name in ("patients", "windows", "rate_hz", "window_seconds"):
        value = getattr(args, name)
        if value is not None:
            rc = replace(rc, **{name: value})
    try:
        params = default_cohort_params(rc.patients, rc.windows, rc.rate_hz, rc.window_seconds, rc.seed)
        cohort = synth_cohort(params)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out(args, "cohort")
    save_cohort(cohort, out, extra={"run_config": rc.snapshot(),
                                    "synth_params": [p.to_dict() for p in params]})
    for r in cohort:
        c = r.class_counts()
        print(f"{r.patient_id}: {len(r)} windows ({c['soz']} SOZ, {c['non_soz']} non-SOZ)")
    print(f"wrote {cohort.N} patients to {out}")
    return EXIT_OK


def cmd_pretrain(args, rc: RunConfig) -> int:
    cohort = load_cohort(args.cohort)
    train, _ = _fold(cohort, args.test_patient)
    net = pretrain(train, rc.model_config(cohort.records[0].window_len), rc.train_config(),
                   fold_seed(rc.seed, args.test_patient))
    net.provenance.update(test_patient_id=args.test_patient, run_config=rc.snapshot(),
                          cohort_fingerprint=cohort.fingerprint())
    out = _out(args, "pretrain.ckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(save_checkpoint(net))
    print(f"pretrained on {len(train)} patients, fingerprint {net.fingerprint()[:16]} -> {out}")
    return EXIT_OK


def cmd_featurize(args, rc: RunConfig) -> int:
    net = _read_checkpoint(args.checkpoint)
    cohort = load_cohort(args.cohort)
    # labels are never needed here; featurize the unlabelled view of every patient
    feats = featurize_cohort(net, [r.unlabeled() for r in cohort])
    out = _out(args, "features.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    fp = save_features(feats, out)
    print(f"featurized {len(feats)} patients ({feats[0].feature_dim if feats else 0} dims), "
          f"fingerprint {fp[:16]} -> {out}")
    return EXIT_OK


def cmd_weights(args, rc: RunConfig) -> int:
    feats = {fs.patient_id: fs for fs in load_features(args.features)}
    if args.test_patient not in feats:
        raise ConfigError(f"patient {args.test_patient!r} not in feature file")
    kernel = rc.kernel_specs()[args.kernel]
    train = [fs for pid, fs in feats.items() if pid != args.test_patient]
    table = compute_weight_table(train, feats[args.test_patient], kernel, rc.train_config().subsample,
                                 fold_seed(rc.seed, args.test_patient))
    out = _out(args, f"weights_{args.kernel}.json")
    _write(out, table.to_json())
    for e in table.entries:
        print(f"{e.patient_id}  mmd2={e.mmd2:.6g}  weight={e.weight:.4f}")
    return EXIT_OK


def cmd_finetune(args, rc: RunConfig) -> int:
    net = _read_checkpoint(args.checkpoint)
    cohort = load_cohort(args.cohort)
    train, _ = _fold(cohort, args.test_patient)
    table = None
    if args.weights:
        table = WeightTable.from_json(Path(args.weights).read_text())
        if table.test_patient_id and table.test_patient_id != args.test_patient:
            raise StageMismatchError(f"weight table was built for {table.test_patient_id}, "
                                     f"not {args.test_patient}")
    tuned = finetune(net, train, table, rc.train_config(), fold_seed(rc.seed, args.test_patient))
    tuned.provenance.update(test_patient_id=args.test_patient, run_config=rc.snapshot())
    out = _out(args, "finetune.ckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(save_checkpoint(tuned))
    print(f"fine-tuned for {tuned.provenance['steps']} steps, fingerprint {tuned.fingerprint()[:16]} -> {out}")
    return EXIT_OK


def cmd_evaluate(args, rc: RunConfig) -> int:
    net = _read_checkpoint(args.checkpoint)
    cohort = load_cohort(args.cohort)
    _, test = _fold(cohort, args.test_patient)
    result = evaluate(net, test, args.method)
    d = result.to_dict()
    d["model_fingerprint"] = net.fingerprint()
    text = json.dumps(d, indent=1, sort_keys=True) + "\n"
    if args.out:
        _write(Path(args.out), text)
    print(f"{test.patient_id} {args.method}: {result.accuracy:.2f}% "
          f"(tp={result.tp} tn={result.tn} fp={result.fp} fn={result.fn})")
    return EXIT_OK


def cmd_lopo(args, rc: RunConfig) -> int:
    cohort = load_cohort(args.cohort)
    if cohort.N < 2:
        raise ConfigError("leave-one-patient-out needs at least two patients")
    methods = args.methods.split(",") if args.methods else list(METHODS)
    if set(methods) - set(METHODS):
        raise ConfigError(f"methods must be drawn from {METHODS}")
    out = _out(args, "lopo")
    patients = args.patients.split(",") if args.patients else None

    def progress(event, pid, method=None):
        print(f"[{pid}] {event}" + (f" {method}" if method else ""), flush=True)

    status = EXIT_OK
    try:
        report = run_lopo(cohort, rc.model_config(cohort.records[0].window_len), rc.train_config(), methods,
                          rc.kernel_specs(), on_event=progress, artifact_dir=out / "folds", patients=patients)
    except FoldError as exc:
        report, status = exc.report, EXIT_FOLD
        for pid, err in exc.failures.items():
            print(f"fold {pid} failed: {err}", file=sys.stderr)
    report.extras["run_config"] = rc.snapshot()
    _write(out / "report.csv", report.to_csv())
    _write(out / "report.json", report.to_json())
    print(render_table(report.to_csv()))
    return status


def render_table(csv_text: str) -> str:
    rows = [line.split(",") for line in csv_text.strip().splitlines()]
    widths = [max(len(r[i]) if i < len(r) else 0 for r in rows) for i in range(len(rows[0]))]
    lines = []
    for k, r in enumerate(rows):
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells))
        if k == 0 or (k == len(rows) - 2 and rows[-1][0] == "Mean"):
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def cmd_report(args, rc: RunConfig) -> int:
    path = Path(args.report)
    if path.is_dir():
        path = path / "report.csv"
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read report {path}: {exc}") from exc
    print(render_table(text))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps a
    # subparser from overwriting a value given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="soz-adapt", parents=[common],
                                description="Cross-patient SOZ classification with MMD patient weights.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort directory")
    s.add_argument("--scale", choices=sorted(RunConfig.SCALES))
    s.add_argument("--patients", type=int)
    s.add_argument("--windows", type=int, help="windows per class per patient")
    s.add_argument("--rate-hz", dest="rate_hz", type=int, help="analysis sampling rate (Hz)")
    s.add_argument("--window-seconds", dest="window_seconds", type=float, help="window length (s)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", parents=[common], help="stage 1 on every patient but the test patient")
    s.add_argument("--cohort", required=True)
    s.add_argument("--test-patient", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("featurize", parents=[common], help="last-block features for every patient")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cohort", required=True)
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("weights", parents=[common], help="MMD weight table for one test patient")
    s.add_argument("--features", required=True)
    s.add_argument("--test-patient", required=True)
    s.add_argument("--kernel", choices=sorted(KERNELS), default="RBF")
    s.set_defaults(func=cmd_weights)

    s = sub.add_parser("finetune", parents=[common], help="stage 2, optionally weighted")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cohort", required=True)
    s.add_argument("--test-patient", required=True)
    s.add_argument("--weights", help="weight table JSON; omit for unweighted fine-tuning")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", parents=[common], help="accuracy on the held-out patient")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cohort", required=True)
    s.add_argument("--test-patient", required=True)
    s.add_argument("--method", default="Standard", choices=METHODS)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("lopo", parents=[common], help="full leave-one-patient-out experiment")
    s.add_argument("--cohort", required=True)
    s.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
    s.add_argument("--patients", help="comma-separated test patients (default: all)")
    s.set_defaults(func=cmd_lopo)

    s = sub.add_parser("report", parents=[common], help="render report.csv as an aligned table")
    s.add_argument("report", help="report.csv or a lopo output directory")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        rc = RunConfig.load(args.config)
        if args.seed is not None:
            rc = replace(rc, seed=args.seed)
        return args.func(args, rc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CohortError, CheckpointError, StageMismatchError) as exc:
        print(f"data integrity error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FoldError as exc:
        print(f"fold failure: {exc}", file=sys.stderr)
        return EXIT_FOLD


if __name__ == "__main__":
    sys.exit(main())
