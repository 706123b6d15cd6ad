"""Pretraining, patient-weighted fine-tuning and the leave-one-patient-out driver."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .cohort import Cohort, PatientRecord, UnlabeledRecord, zscore
from .mmd import KernelSpec, WeightTable, compute_weight_table
from .model import FeatureSet, SozNet, SozNetConfig, StageMismatchError, build, save_checkpoint
from .optim import Adam

log = logging.getLogger(__name__)

LR_GRID = (5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5)
METHODS = ("Standard", "Multiscale", "RBF")
KERNELS = {"Multiscale": KernelSpec.multiscale(), "RBF": KernelSpec.rbf()}
EVAL_BATCH = 256


@dataclass(frozen=True)
class TrainConfig:
    epochs_pretrain: int = 200
    epochs_finetune: int = 5
    batch_size: int = 512
    lr_grid: tuple = LR_GRID
    lr_pretrain: float = 1e-4
    lr_finetune: float = 1e-5
    seed: int = 0
    shuffle: bool = True
    subsample: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "lr_grid", tuple(float(v) for v in self.lr_grid))
        for name in ("lr_pretrain", "lr_finetune"):
            lr = getattr(self, name)
            if not any(math.isclose(lr, g, rel_tol=1e-12) for g in self.lr_grid):
                raise ValueError(f"{name}={lr} is not in the learning-rate grid {self.lr_grid}")
        if min(self.epochs_pretrain, self.epochs_finetune, self.batch_size) <= 0:
            raise ValueError("epochs and batch size must be positive")
        if self.subsample < 2:
            raise ValueError("subsample must be at least 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_grid"] = list(self.lr_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any sequence of printable parts."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def fold_seed(master_seed: int, patient_id: str) -> int:
    return derive_seed(master_seed, patient_id)


def model_inputs(windows: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Per-window z-scored model inputs, shape (n, L)."""
    return zscore(np.asarray(windows, dtype=np.float64)).astype(dtype)


@dataclass
class TrainingSet:
    X: np.ndarray
    y: np.ndarray
    owners: np.ndarray  # patient id of each row
    patient_ids: list


def stack_records(records: Sequence[PatientRecord], dtype=np.float32) -> TrainingSet:
    records = list(records)
    if not records or sum(len(r) for r in records) == 0:
        raise ValueError("empty training set")
    X = np.concatenate([model_inputs(r.windows, dtype) for r in records])
    y = np.concatenate([r.labels for r in records])
    owners = np.concatenate([np.full(len(r), r.patient_id, dtype=object) for r in records])
    return TrainingSet(X, y, owners, [r.patient_id for r in records])


def weighted_loss(logits, labels, weights):
    return T.cross_entropy(logits, labels, weights)


def fit(net: SozNet, data: TrainingSet, epochs: int, lr: float, batch_size: int, seed: int,
        shuffle: bool = True, sample_weights: Optional[np.ndarray] = None,
        batch_loss: Optional[Callable] = None) -> dict:
    """Mini-batch Adam on (optionally weighted) cross-entropy; updates ``net`` in place.

    One generator drives both the epoch permutations and dropout, so a run
    is a pure function of (initial parameters, data, seed).
    ``batch_loss(logits, batch_index)`` can replace the default loss.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(net.parameters(), lr)
    n = len(data.y)
    curve, steps = [], 0
    for _ in range(epochs):
        order = rng.permutation(n) if shuffle else np.arange(n)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits = net.forward(data.X[idx], training=True, rng=rng)
            if batch_loss is not None:
                loss = batch_loss(logits, idx)
            else:
                w = None if sample_weights is None else sample_weights[idx]
                loss = weighted_loss(logits, data.y[idx], w)
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps += 1
            total += loss.item() * len(idx)
            seen += len(idx)
        curve.append(total / seen)
    return {"loss_curve": curve, "steps": steps, "adam": opt.state.hyperparameters()}


def pretrain(train: Cohort, model_config: SozNetConfig, config: TrainConfig, seed: int,
             dtype=np.float32) -> SozNet:
    """Stage 1: supervised training from scratch on every training patient."""
    if train.N == 0:
        raise ValueError("empty training set")
    data = stack_records(list(train), dtype)
    net = build(model_config, seed=derive_seed(seed, "init"), dtype=dtype)
    stats = fit(net, data, config.epochs_pretrain, config.lr_pretrain, config.batch_size,
                derive_seed(seed, "pretrain"), config.shuffle)
    net.provenance = {
        "stage": "pretrain",
        "seed": seed,
        "train_patients": data.patient_ids,
        "epochs": config.epochs_pretrain,
        "batch_size": config.batch_size,
        **stats,
    }
    return net


def featurize_cohort(net: SozNet, records: Sequence, batch_size: int = EVAL_BATCH) -> list:
    """Eval-mode last-block features per patient. Accepts labelled or unlabelled records."""
    fp = net.fingerprint()
    out = []
    for r in records:
        X = model_inputs(r.windows, net.dtype)
        if X.shape[1] != net.config.input_length:
            raise T.ShapeError(f"{r.patient_id}: window length {X.shape[1]} != model input "
                               f"{net.config.input_length}")
        rows = [net.extract_features(X[i:i + batch_size]) for i in range(0, len(X), batch_size)]
        width = net.config.flatten_width()
        matrix = np.concatenate(rows) if rows else np.zeros((0, width), dtype=net.dtype)
        out.append(FeatureSet(r.patient_id, matrix, fp))
    return out


def finetune(net: SozNet, train: Cohort, weight_table: Optional[WeightTable], config: TrainConfig,
             seed: int, batch_loss: Optional[Callable] = None) -> SozNet:
    """Stage 2: continue training all parameters with per-patient sample weights.

    ``weight_table=None`` is plain unweighted fine-tuning. The input network
    is left untouched.
    """
    data = stack_records(list(train), net.dtype)
    weights = None
    if weight_table is not None:
        if sorted(weight_table.patient_ids) != sorted(data.patient_ids):
            raise StageMismatchError(f"weight table covers {sorted(weight_table.patient_ids)} but training "
                             f"patients are {sorted(data.patient_ids)}")
        if weight_table.model_fingerprint and weight_table.model_fingerprint != net.fingerprint():
            raise StageMismatchError("weight table was computed from a different model")
        lookup = weight_table.as_dict()
        weights = np.array([lookup[pid] for pid in data.owners], dtype=net.dtype)
    parent = net.fingerprint()
    tuned = net.copy()
    stats = fit(tuned, data, config.epochs_finetune, config.lr_finetune, config.batch_size,
                derive_seed(seed, "finetune"), config.shuffle, weights, batch_loss)
    tuned.provenance = {
        "stage": "finetune",
        "seed": seed,
        "parent_fingerprint": parent,
        "weight_table_fingerprint": weight_table.fingerprint() if weight_table is not None else None,
        "train_patients": data.patient_ids,
        "epochs": config.epochs_finetune,
        "batch_size": config.batch_size,
        **stats,
    }
    return tuned


@dataclass
class FoldResult:
    test_patient_id: str
    method: str
    accuracy: float
    n_test: int
    tp: int
    tn: int
    fp: int
    fn: int
    weight_table: Optional[dict] = None

    def __post_init__(self):
        if self.tp + self.tn + self.fp + self.fn != self.n_test:
            raise ValueError("confusion counts do not sum to n_test")

    def to_dict(self) -> dict:
        return asdict(self)


def predict(net: SozNet, windows: np.ndarray, batch_size: int = EVAL_BATCH) -> np.ndarray:
    X = model_inputs(windows, net.dtype)
    preds = [net.forward(X[i:i + batch_size], training=False).data.argmax(axis=1)
             for i in range(0, len(X), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def score(test_patient_id: str, method: str, predictions, labels) -> FoldResult:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    tp = int(((predictions == 1) & (labels == 1)).sum())
    tn = int(((predictions == 0) & (labels == 0)).sum())
    fp = int(((predictions == 1) & (labels == 0)).sum())
    fn = int(((predictions == 0) & (labels == 1)).sum())
    n = len(labels)
    acc = 100.0 * (tp + tn) / n if n else float("nan")
    return FoldResult(test_patient_id, method, acc, n, tp, tn, fp, fn)


def evaluate(net: SozNet, test: PatientRecord, method: str = "Standard") -> FoldResult:
    """Eval-mode argmax accuracy (percent) on the held-out patient."""
    predictions = predict(net, test.windows)
    return score(test.patient_id, method, predictions, test.labels)


@dataclass
class ExperimentReport:
    results: list
    methods: list
    patient_ids: list
    config: dict = field(default_factory=dict)
    cohort_fingerprint: str = ""
    extras: dict = field(default_factory=dict)

    def accuracy(self, patient_id: str, method: str) -> float:
        for r in self.results:
            if r.test_patient_id == patient_id and r.method == method:
                return r.accuracy
        raise KeyError((patient_id, method))

    def means(self) -> dict:
        out = {}
        for m in self.methods:
            vals = [r.accuracy for r in self.results if r.method == m]
            out[m] = float(np.mean(vals)) if vals else float("nan")
        return out

    def to_csv(self) -> str:
        lines = [",".join(["patient"] + list(self.methods))]
        done = {(r.test_patient_id, r.method) for r in self.results}
        for pid in self.patient_ids:
            cells = [f"{self.accuracy(pid, m):.2f}" if (pid, m) in done else "" for m in self.methods]
            lines.append(",".join([pid] + cells))
        means = self.means()
        lines.append(",".join(["Mean"] + [f"{means[m]:.2f}" for m in self.methods]))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        d = {
            "methods": list(self.methods),
            "patients": list(self.patient_ids),
            "results": [r.to_dict() for r in self.results],
            "means": self.means(),
            "config": self.config,
            "cohort_fingerprint": self.cohort_fingerprint,
            **self.extras,
        }
        return json.dumps(d, indent=1, sort_keys=True) + "\n"


class FoldError(RuntimeError):
    def __init__(self, failures: dict, report: ExperimentReport):
        self.failures = failures
        self.report = report
        names = ", ".join(f"{pid}: {err!r}" for pid, err in failures.items())
        super().__init__(f"{len(failures)} fold(s) failed ({names})")


def run_fold(cohort: Cohort, test_id: str, model_config: SozNetConfig, config: TrainConfig,
             methods: Sequence[str] = METHODS, kernels: Optional[dict] = None,
             on_event: Optional[Callable] = None, artifact_dir: Optional[Path] = None) -> dict:
    """One leave-one-patient-out fold. The held-out labels are only read by ``evaluate``."""
    kernels = kernels or KERNELS
    emit = on_event or (lambda *a, **k: None)
    seed = fold_seed(config.seed, test_id)
    train = cohort.without(test_id)
    test = cohort.get(test_id)
    emit("fold_start", test_id)
    t0 = time.perf_counter()
    base = pretrain(train, model_config, config, seed)
    log.info("fold %s: pretrained in %.0fs, final loss %.4f", test_id, time.perf_counter() - t0,
             base.provenance["loss_curve"][-1])
    fold = {"seed": seed, "pretrain": base.provenance, "results": [], "weight_tables": {},
            "finetune": {}}
    if artifact_dir is not None:
        artifact_dir.mkdir(parents=True, exist_ok=True)
        (artifact_dir / "pretrain.ckpt").write_bytes(save_checkpoint(base))

    weighted = [m for m in methods if m != "Standard"]
    if weighted:
        emit("featurize", test_id)
        train_feats = featurize_cohort(base, list(train))
        test_feats = featurize_cohort(base, [test.unlabeled()])[0]
    for method in methods:
        if method == "Standard":
            emit("evaluate", test_id, method)
            fold["results"].append(evaluate(base, test, method))
            continue
        emit("weights", test_id, method)
        table = compute_weight_table(train_feats, test_feats, kernels[method], config.subsample, seed)
        emit("finetune", test_id, method)
        tuned = finetune(base, train, table, config, seed)
        emit("evaluate", test_id, method)
        result = evaluate(tuned, test, method)
        result.weight_table = json.loads(table.to_json())
        fold["results"].append(result)
        fold["weight_tables"][method] = result.weight_table
        fold["finetune"][method] = {"loss_curve": tuned.provenance["loss_curve"],
                                    "steps": tuned.provenance["steps"]}
        if artifact_dir is not None:
            (artifact_dir / f"weights_{method}.json").write_text(table.to_json())
            (artifact_dir / f"finetune_{method}.ckpt").write_bytes(save_checkpoint(tuned))
    emit("fold_end", test_id)
    log.info("fold %s: %s", test_id, ", ".join(f"{r.method}={r.accuracy:.2f}" for r in fold["results"]))
    return fold


def run_lopo(cohort: Cohort, model_config: SozNetConfig, config: TrainConfig,
             methods: Sequence[str] = METHODS, kernels: Optional[dict] = None,
             on_event: Optional[Callable] = None, artifact_dir=None,
             patients: Optional[Sequence[str]] = None) -> ExperimentReport:
    """Leave-one-patient-out over the cohort for each requested method.

    Per-fold seeds depend only on (config.seed, patient id), so folds are
    independent of execution order. Failed folds are collected and raised
    together as :class:`FoldError` carrying the partial report.
    """
    methods = list(methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    if cohort.N < 2:
        raise ValueError("leave-one-patient-out needs at least two patients")
    patients = list(patients) if patients is not None else cohort.patient_ids
    results, folds, failures = [], {}, {}
    for pid in patients:
        fold_dir = Path(artifact_dir) / pid if artifact_dir is not None else None
        try:
            fold = run_fold(cohort, pid, model_config, config, methods, kernels, on_event, fold_dir)
        except Exception as exc:  # keep going; report every failing fold at the end
            log.exception("fold %s failed", pid)
            failures[pid] = exc
            continue
        results.extend(fold.pop("results"))
        folds[pid] = fold
    report = ExperimentReport(
        results=results,
        methods=methods,
        patient_ids=patients,
        config={"model": model_config.to_dict(), "train": config.to_dict(),
                "kernels": {m: k.to_dict() for m, k in (kernels or KERNELS).items() if m in methods}},
        cohort_fingerprint=cohort.fingerprint(),
        extras={"folds": folds},
    )
    if failures:
        raise FoldError(failures, report)
    return report
