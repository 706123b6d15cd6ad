"""Patient records, signal preprocessing, on-disk cohort format and a synthetic cohort generator.

The synthetic generator stands in for clinical recordings. Patients fall
into clusters; a cluster shares a background character (AR resonance and
1/f tilt, jittered per patient) and a discharge profile. SOZ windows carry
Poisson-timed spike-and-slow-wave complexes; non-SOZ windows carry
propagated discharges twice as broad as the local ones. Width alone does
not identify the class across clusters (one cluster's SOZ width is the next
cluster's propagated width), so a pooled classifier transfers unevenly to a
new patient while patients of the same cluster remain mutually informative.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.signal import lfilter

COHORT_VERSION = 1
MANIFEST = "manifest.json"

# age, sex, lesion site, pathology, Engel class, follow-up (years), acquisition rate (Hz)
CLINICAL_TABLE = {
    "P01": (5, "F", "Lt dorsal superior temporal gyrus", "Cortical surface", "Type 2B", 3.0, 2000),
    "P02": (39, "F", "Lt dorsal superior frontal gyrus", "Bottom of sulcus", "Type 2B", 3.0, 2000),
    "P03": (5, "M", "Lt cingulate gyrus", "Bottom of sulcus", "Type 2B", 3.5, 2000),
    "P04": (6, "M", "Rt dorsal middle frontal gyrus", "Cortical surface", "Type 2B", 3.5, 2000),
    "P05": (20, "M", "Rt middle frontal gyrus", "Cortical surface", "Type 2A", 4.5, 2000),
    "P06": (15, "M", "Lt superior parietal lobule", "Cortical surface", "Type 2B", 5.0, 2000),
    "P07": (32, "M", "Lt superior parietal lobule", "Bottom of sulcus", "Type 2B", 5.0, 2000),
    "P08": (25, "M", "Lt angular gyrus", "Bottom of sulcus", "Type 2A", 5.0, 2000),
    "P09": (38, "F", "Rt supramarginal gyrus", "Surface and vertical cortex", "Type 2B", 5.5, 1000),
    "P10": (14, "F", "Rt inferior frontal gyrus", "Cortical surface", "Type 2B", 5.5, 1000),
    "P11": (13, "M", "Lt angular gyrus", "Surface and vertical cortex", "Type 2B", 5.0, 1000),
}

# (SOZ spike width, propagated non-SOZ spike width) in ms
DISCHARGE_PROFILES = ((20.0, 40.0), (40.0, 80.0), (80.0, 160.0))
# (AR resonance Hz, 1/f tilt) shared by the patients of a cluster, jittered per patient
BACKGROUND_PROFILES = ((4.0, 1.0), (9.0, 0.6), (15.0, 0.3))


class CohortError(Exception):
    pass


class ManifestMissingError(CohortError):
    pass


class CohortIntegrityError(CohortError):
    pass


class UnsupportedVersionError(CohortError):
    pass


# ---------------------------------------------------------------------------
# preprocessing

def lowpass_taps(taps: int = 31, cutoff: float = 0.35) -> np.ndarray:
    """Hamming-windowed sinc low-pass; ``cutoff`` is a fraction of the input sampling rate."""
    n = np.arange(taps) - (taps - 1) / 2
    h = 2 * cutoff * np.sinc(2 * cutoff * n) * np.hamming(taps)
    return h / h.sum()


def downsample_2to1(signal, taps: int = 31) -> np.ndarray:
    """Anti-alias filter then keep every second sample (e.g. 2000 Hz -> 1000 Hz).

    The cutoff sits at 0.7 of the output Nyquist frequency so the band up to
    0.4 x Nyquist is flat to <1% while content above Nyquist is attenuated
    by more than 26 dB.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("downsample_2to1 expects a 1-d signal")
    if taps % 2 == 0:
        raise ValueError(f"taps must be odd, got {taps}")
    if len(x) % 2:
        raise ValueError(f"signal length must be even, got {len(x)}")
    if len(x) < taps:
        raise ValueError(f"signal of length {len(x)} shorter than the {taps}-tap filter")
    half = taps // 2
    padded = np.pad(x, half, mode="symmetric")
    filtered = np.convolve(padded, lowpass_taps(taps, cutoff=0.175), mode="valid")
    return filtered[::2]


def window(signal, rate_hz: float, window_seconds: float = 3.0) -> np.ndarray:
    """Non-overlapping windows of ``window_seconds``; the tail is discarded."""
    x = np.asarray(signal)
    width = int(round(window_seconds * rate_hz))
    count = len(x) // width
    return x[:count * width].reshape(count, width)


def zscore(x, floor: float = 1e-8) -> np.ndarray:
    """Zero mean, unit variance along the last axis; constant rows map to zeros."""
    x = np.asarray(x)
    if x.shape[-1] < 2:
        raise ValueError("zscore needs at least two samples")
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    sd = np.maximum(x64.std(axis=-1, keepdims=True), floor)
    out = (x64 - mean) / sd
    return out.astype(x.dtype) if np.issubdtype(x.dtype, np.floating) else out


# ---------------------------------------------------------------------------
# records

@dataclass
class PatientRecord:
    patient_id: str
    sampling_rate_hz: int
    windows: np.ndarray
    labels: np.ndarray
    metadata: dict = field(default_factory=dict)
    rate_hz: Optional[int] = None  # effective rate after resampling

    def __post_init__(self):
        self.windows = np.asarray(self.windows)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rate_hz is None:
            self.rate_hz = self.sampling_rate_hz
        if self.windows.ndim != 2:
            raise ValueError(f"windows must be (n, window_len), got {self.windows.shape}")
        if self.labels.shape != (len(self.windows),):
            raise ValueError(f"{len(self.labels)} labels for {len(self.windows)} windows")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("labels must be 0 (non-SOZ) or 1 (SOZ)")

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def window_len(self) -> int:
        return self.windows.shape[1]

    def class_counts(self) -> dict:
        return {"soz": int((self.labels == 1).sum()), "non_soz": int((self.labels == 0).sum())}

    def unlabeled(self) -> "UnlabeledRecord":
        return UnlabeledRecord(self.patient_id, self.windows)


@dataclass(frozen=True)
class UnlabeledRecord:
    """Windows of a held-out patient with the labels stripped."""
    patient_id: str
    windows: np.ndarray

    def __len__(self) -> int:
        return len(self.windows)


@dataclass
class Cohort:
    records: list

    def __post_init__(self):
        ids = [r.patient_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate patient ids in {ids}")
        lengths = {r.window_len for r in self.records}
        if len(lengths) > 1:
            raise ValueError(f"records disagree on window length: {sorted(lengths)}")

    @property
    def N(self) -> int:
        return len(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def patient_ids(self) -> list:
        return [r.patient_id for r in self.records]

    def get(self, patient_id: str) -> PatientRecord:
        for r in self.records:
            if r.patient_id == patient_id:
                return r
        raise KeyError(patient_id)

    def without(self, patient_id: str) -> "Cohort":
        self.get(patient_id)
        return Cohort([r for r in self.records if r.patient_id != patient_id])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(r.patient_id.encode())
            h.update(np.ascontiguousarray(r.windows, dtype="<f4").tobytes())
            h.update(np.ascontiguousarray(r.labels, dtype="<i1").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# synthetic generation

@dataclass(frozen=True)
class SynthParams:
    patient_id: str
    rate_hz: int = 250
    source_rate_hz: int = 250
    n_windows: int = 400  # per class
    window_seconds: float = 3.0
    seed: int = 0
    # background
    ar_freq_hz: float = 8.0
    ar_radius: float = 0.95
    spectral_tilt: float = 1.0
    gain: float = 1.0
    line_freq_hz: float = 50.0
    line_amp: float = 0.0
    # SOZ discharges
    spike_rate_hz: float = 1.5
    spike_width_ms: float = 40.0
    spike_amp: float = 4.0
    amp_jitter: float = 0.15
    slow_wave_mix: float = 0.5
    slow_wave_ms: float = 200.0
    # propagated discharges in non-SOZ windows
    propagated_rate_hz: float = 0.0
    propagated_amp: float = 0.0
    propagated_width_ms: float = 80.0
    metadata: tuple = ()

    def validate(self) -> None:
        if self.spike_rate_hz <= 0:
            raise ValueError("SOZ spike rate must be positive")
        if self.gain <= 0:
            raise ValueError("gain must be positive")
        if self.source_rate_hz not in (self.rate_hz, 2 * self.rate_hz):
            raise ValueError("source rate must equal the target rate or twice it")
        if not 0 < self.ar_radius < 1:
            raise ValueError("AR pole radius must lie in (0, 1)")
        if self.ar_freq_hz <= 0 or self.ar_freq_hz >= self.source_rate_hz / 2:
            raise ValueError("AR resonance must lie below Nyquist")
        if self.n_windows < 0 or self.window_seconds <= 0:
            raise ValueError("window count/length must be non-negative/positive")
        if min(self.spike_width_ms, self.propagated_width_ms, self.slow_wave_ms) <= 0 or self.spike_amp < 0:
            raise ValueError("discharge morphology must be positive")
        if self.propagated_rate_hz < 0 or self.propagated_amp < 0 or self.line_amp < 0:
            raise ValueError("rates and amplitudes must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metadata"] = dict(self.metadata)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthParams":
        d = dict(d)
        d["metadata"] = tuple(sorted((d.get("metadata") or {}).items()))
        return cls(**d)


def _background(p: SynthParams, n: int, rng: np.random.Generator) -> np.ndarray:
    burn = 2 * p.source_rate_hz
    white = rng.standard_normal(n + burn)
    if p.spectral_tilt:
        spec = np.fft.rfft(white)
        f = np.fft.rfftfreq(len(white), 1.0 / p.source_rate_hz)
        f[0] = f[1]
        white = np.fft.irfft(spec * f ** (-p.spectral_tilt / 2), n=len(white))
    theta = 2 * np.pi * p.ar_freq_hz / p.source_rate_hz
    a = [1.0, -2 * p.ar_radius * np.cos(theta), p.ar_radius ** 2]
    bg = lfilter([1.0], a, white)[burn:]
    bg = (bg - bg.mean()) / bg.std()
    return p.gain * bg


def _discharge_kernel(p: SynthParams, width_ms: float) -> np.ndarray:
    """Spike followed by an opposite-polarity slow wave, unit peak."""
    fs = p.source_rate_hz
    sd_spike = width_ms / 4000 * fs
    sd_slow = p.slow_wave_ms / 4000 * fs
    centre = 4 * sd_spike
    t = np.arange(int(np.ceil(centre + width_ms / 2000 * fs + 4 * sd_slow)) + 1, dtype=np.float64)
    spike = np.exp(-0.5 * ((t - centre) / sd_spike) ** 2)
    slow_centre = centre + width_ms / 2000 * fs + 2 * sd_slow
    slow = np.exp(-0.5 * ((t - slow_centre) / sd_slow) ** 2)
    return spike - 0.6 * p.slow_wave_mix * slow


def _add_discharges(x: np.ndarray, p: SynthParams, rate: float, amp: float, width_ms: float,
                    rng: np.random.Generator) -> None:
    if rate <= 0 or amp <= 0:
        return
    duration = len(x) / p.source_rate_hz
    count = rng.poisson(rate * duration)
    onsets = np.sort(rng.integers(0, len(x), size=count))
    kernel = _discharge_kernel(p, width_ms)
    jitter = np.exp(p.amp_jitter * rng.standard_normal(count))
    for onset, j in zip(onsets, jitter):
        stop = min(len(x), onset + len(kernel))
        x[onset:stop] += amp * p.gain * j * kernel[:stop - onset]


def _mains(p: SynthParams, n: int, rng: np.random.Generator) -> np.ndarray:
    if p.line_amp == 0:
        return np.zeros(n)
    t = np.arange(n) / p.source_rate_hz
    return p.line_amp * np.sin(2 * np.pi * p.line_freq_hz * t + rng.uniform(0, 2 * np.pi))


def _recording(p: SynthParams, soz: bool, rng: np.random.Generator) -> np.ndarray:
    n = int(round(p.n_windows * p.window_seconds * p.source_rate_hz))
    x = _background(p, n, rng) + _mains(p, n, rng)
    if soz:
        _add_discharges(x, p, p.spike_rate_hz, p.spike_amp, p.spike_width_ms, rng)
    else:
        _add_discharges(x, p, p.propagated_rate_hz, p.propagated_amp, p.propagated_width_ms, rng)
    if p.source_rate_hz == 2 * p.rate_hz and n:
        x = downsample_2to1(x)
    return x


def synth_patient(params: SynthParams, patient_seed: Optional[int] = None) -> PatientRecord:
    """Generate a balanced labelled record; deterministic in (params, seed)."""
    params.validate()
    seed = params.seed if patient_seed is None else patient_seed
    rng = np.random.default_rng(seed)
    blocks, labels = [], []
    for label in (1, 0):
        rec = _recording(params, soz=bool(label), rng=rng)
        w = window(rec, params.rate_hz, params.window_seconds)
        blocks.append(w)
        labels.append(np.full(len(w), label, dtype=np.int64))
    windows = np.concatenate(blocks).astype(np.float32)
    meta = dict(params.metadata)
    meta["seed"] = seed
    return PatientRecord(params.patient_id, params.source_rate_hz, windows, np.concatenate(labels), meta,
                         rate_hz=params.rate_hz)


def patient_ids(n: int) -> list:
    return [f"P{i + 1:02d}" for i in range(n)]


def default_cohort_params(n_patients: int = 11, n_windows: int = 400, rate_hz: int = 250,
                          window_seconds: float = 3.0, master_seed: int = 0,
                          discharge_profiles=DISCHARGE_PROFILES, background_profiles=BACKGROUND_PROFILES) -> list:
    """Per-patient synthetic parameters with random backgrounds and clustered discharge profiles.

    Patients whose clinical acquisition rate was twice the analysis rate are
    generated at the doubled rate and resampled, mirroring the clinical
    pipeline. Patient i belongs to cluster i mod len(discharge_profiles) and
    takes that cluster's discharge widths and background profile.
    """
    rng = np.random.default_rng(master_seed)
    out = []
    for i, pid in enumerate(patient_ids(n_patients)):
        clinical = CLINICAL_TABLE.get(pid)
        doubled = clinical is not None and clinical[6] == 2000
        cluster = i % len(discharge_profiles)
        soz_width, prop_width = discharge_profiles[cluster]
        ar_centre, tilt_centre = background_profiles[cluster % len(background_profiles)]
        meta = {"discharge_profile": cluster}
        if clinical is not None:
            meta.update(age=clinical[0], sex=clinical[1], lesion_site=clinical[2], pathology=clinical[3],
                        engel=clinical[4], follow_up_years=clinical[5], clinical_rate_hz=clinical[6])
        stretch = float(rng.uniform(0.9, 1.1))
        amp = float(rng.uniform(4.0, 6.0))
        out.append(SynthParams(
            patient_id=pid,
            rate_hz=rate_hz,
            source_rate_hz=2 * rate_hz if doubled else rate_hz,
            n_windows=n_windows,
            window_seconds=window_seconds,
            seed=int(rng.integers(2 ** 31)),
            ar_freq_hz=ar_centre * float(rng.uniform(0.85, 1.15)),
            ar_radius=float(rng.uniform(0.8, 0.95)),
            spectral_tilt=max(0.0, tilt_centre + float(rng.uniform(-0.1, 0.1))),
            gain=float(np.exp(rng.normal(0.0, 0.5))),
            line_freq_hz=float(rng.choice([50.0, 60.0])),
            line_amp=float(rng.uniform(0.0, 0.4)),
            spike_rate_hz=float(rng.uniform(1.5, 2.5)),
            spike_width_ms=soz_width * stretch,
            spike_amp=amp,
            slow_wave_mix=float(rng.uniform(0.3, 0.8)),
            slow_wave_ms=float(rng.uniform(150.0, 300.0)),
            propagated_rate_hz=float(rng.uniform(1.5, 2.5)),
            propagated_amp=amp,
            propagated_width_ms=prop_width * stretch,
            metadata=tuple(sorted(meta.items())),
        ))
    return out


def synth_cohort(params_list: list) -> Cohort:
    return Cohort([synth_patient(p) for p in params_list])


# ---------------------------------------------------------------------------
# storage

def _rle(labels: np.ndarray) -> list:
    runs = []
    for v in labels.tolist():
        if runs and runs[-1][0] == v:
            runs[-1][1] += 1
        else:
            runs.append([v, 1])
    return runs


def _unrle(runs: list) -> np.ndarray:
    if not runs:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.full(n, v, dtype=np.int64) for v, n in runs])


def save_cohort(cohort: Cohort, directory, extra: Optional[dict] = None) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 file per patient."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    patients = []
    for r in cohort:
        fname = f"{r.patient_id}.f32"
        (directory / fname).write_bytes(np.ascontiguousarray(r.windows, dtype="<f4").tobytes())
        counts = r.class_counts()
        patients.append({
            "id": r.patient_id,
            "file": fname,
            "sampling_rate_hz": int(r.sampling_rate_hz),
            "rate_hz": int(r.rate_hz),
            "n_windows": len(r),
            "window_len": r.window_len,
            "n_soz": counts["soz"],
            "n_non_soz": counts["non_soz"],
            "labels_rle": _rle(r.labels),
            "metadata": r.metadata,
        })
    manifest = {
        "version": COHORT_VERSION,
        "n_patients": cohort.N,
        "window_len": cohort.records[0].window_len if cohort.records else None,
        "patients": patients,
        "fingerprint": cohort.fingerprint(),
    }
    if extra:
        manifest.update(extra)
    with open(directory / MANIFEST, "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise ManifestMissingError(f"no {MANIFEST} in {directory}")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != COHORT_VERSION:
        raise UnsupportedVersionError(f"cohort version {manifest.get('version')!r} is not supported")
    return manifest


def load_cohort(directory) -> Cohort:
    directory = Path(directory)
    manifest = read_manifest(directory)
    records = []
    for entry in manifest["patients"]:
        path = directory / entry["file"]
        if not path.exists():
            raise CohortIntegrityError(f"missing payload {path.name}")
        raw = np.frombuffer(path.read_bytes(), dtype="<f4")
        n, width = entry["n_windows"], entry["window_len"]
        if raw.size != n * width:
            raise CohortIntegrityError(
                f"{entry['id']}: payload holds {raw.size} values, manifest expects {n} x {width}")
        labels = _unrle(entry["labels_rle"])
        if len(labels) != n:
            raise CohortIntegrityError(f"{entry['id']}: {len(labels)} labels for {n} windows")
        records.append(PatientRecord(entry["id"], entry["sampling_rate_hz"],
                                     raw.astype(np.float32).reshape(n, width), labels,
                                     entry.get("metadata") or {}, rate_hz=entry["rate_hz"]))
    return Cohort(records)
