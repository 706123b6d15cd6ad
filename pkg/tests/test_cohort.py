import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import kurtosis

from soz_adapt.cohort import (BACKGROUND_PROFILES, Cohort, CohortIntegrityError, ManifestMissingError,
                              PatientRecord, SynthParams, UnsupportedVersionError, default_cohort_params, downsample_2to1, load_cohort,
                              lowpass_taps, save_cohort, synth_cohort, synth_patient, window, zscore)


def frequency_response(taps, freqs, fs):
    n = np.arange(len(taps))
    return np.abs(np.exp(-2j * np.pi * np.outer(np.asarray(freqs) / fs, n)) @ taps)


# resampling

def test_downsample_preserves_constant():
    out = downsample_2to1(np.full(400, 3.7))
    assert out.shape == (200,)
    np.testing.assert_allclose(out, 3.7, atol=1e-6)


def test_downsample_passes_100hz_sine():
    t_in = np.arange(4000) / 2000.0
    out = downsample_2to1(np.sin(2 * np.pi * 100 * t_in))
    t_out = np.arange(2000) / 1000.0
    trim = slice(50, -50)
    expected = np.sin(2 * np.pi * 100 * t_out)
    np.testing.assert_allclose(out[trim], expected[trim], atol=0.01)
    amp = np.sqrt(2) * out[trim].std()
    assert abs(amp - 1) < 0.01


def test_downsample_attenuates_900hz_sine():
    t_in = np.arange(4000) / 2000.0
    x = np.sin(2 * np.pi * 900 * t_in)
    out = downsample_2to1(x)
    rms = lambda v: np.sqrt(np.mean(v ** 2))  # noqa: E731
    assert rms(out[50:-50]) < 0.05 * rms(x)


def test_filter_passband_and_stopband():
    taps = lowpass_taps(31, 0.175)
    fs = 2000.0
    assert abs(taps.sum() - 1) < 1e-12
    passband = frequency_response(taps, np.linspace(0, 0.4 * 500, 200), fs)
    assert np.max(np.abs(passband - 1)) < 0.01
    stopband = frequency_response(taps, np.linspace(500, 1000, 500), fs)
    assert 20 * np.log10(stopband.max()) <= -26


def test_filter_is_linear_phase():
    taps = lowpass_taps()
    np.testing.assert_allclose(taps, taps[::-1])


@pytest.mark.parametrize("kwargs, length", [({"taps": 30}, 64), ({}, 63), ({}, 20)])
def test_downsample_rejects_bad_input(kwargs, length):
    with pytest.raises(ValueError):
        downsample_2to1(np.zeros(length), **kwargs)


# windowing and normalisation

@pytest.mark.parametrize("total, count", [(9000, 3), (9500, 3), (2999, 0)])
def test_window_counts(total, count):
    w = window(np.arange(total, dtype=float), 1000)
    assert w.shape == (count, 3000)
    if count:
        np.testing.assert_array_equal(w[1, :3], [3000, 3001, 3002])


@given(total=st.integers(0, 20000), rate=st.sampled_from([250, 500, 1000]), seconds=st.sampled_from([1.0, 3.0]))
def test_window_conserves_samples(total, rate, seconds):
    w = window(np.zeros(total), rate, seconds)
    width = int(rate * seconds)
    assert w.shape[1] == width
    assert w.shape[0] * width + total % width == total


def test_zscore_examples():
    z = zscore(np.array([1.0, 2.0, 3.0]))
    assert abs(z.mean()) < 1e-15 and abs(z.std() - 1) < 1e-12
    np.testing.assert_array_equal(zscore(np.array([5.0, 5.0, 5.0, 5.0])), 0.0)


@settings(max_examples=50)
@given(seed=st.integers(0, 10 ** 6), scale=st.floats(1e-3, 1e4), shift=st.floats(-1e3, 1e3))
def test_zscore_idempotent_and_affine_invariant(seed, scale, shift):
    x = np.random.default_rng(seed).normal(size=(3, 50))
    z = zscore(x)
    np.testing.assert_allclose(zscore(z), z, atol=1e-10)
    np.testing.assert_allclose(zscore(scale * x + shift), z, atol=1e-6)


# synthetic patients

def base_params(**kw):
    p = SynthParams(patient_id="P01", n_windows=200, seed=3, spike_amp=5.0, propagated_amp=0.0)
    return replace(p, **kw)


def test_synth_patient_is_balanced_and_deterministic():
    a, b = synth_patient(base_params()), synth_patient(base_params())
    assert a.class_counts() == {"soz": 200, "non_soz": 200}
    assert a.window_len == 750
    np.testing.assert_array_equal(a.windows, b.windows)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.windows, synth_patient(base_params(), patient_seed=4).windows)


def test_power_ratio_tracks_gain_squared():
    a = synth_patient(base_params(gain=1.0, n_windows=600, spike_amp=0.0))
    b = synth_patient(base_params(gain=2.5, n_windows=600, spike_amp=0.0, seed=11))
    ratio = np.mean(b.windows.astype(float) ** 2) / np.mean(a.windows.astype(float) ** 2)
    assert abs(ratio / 2.5 ** 2 - 1) < 0.05


def test_soz_windows_are_more_kurtotic():
    r = synth_patient(base_params(spike_amp=3.0))
    k = kurtosis(r.windows.astype(float), axis=1)
    assert np.median(k[r.labels == 1]) > np.median(k[r.labels == 0])


def test_doubled_source_rate_is_resampled():
    r = synth_patient(base_params(source_rate_hz=500, rate_hz=250, n_windows=10))
    assert r.window_len == 750 and r.sampling_rate_hz == 500 and r.rate_hz == 250


@pytest.mark.parametrize("bad", [dict(spike_rate_hz=0.0), dict(gain=0.0), dict(gain=-1.0),
                                 dict(source_rate_hz=300), dict(ar_radius=1.0)])
def test_invalid_params_rejected(bad):
    with pytest.raises(ValueError):
        synth_patient(base_params(**bad))


def test_default_cohort_shape_and_clusters():
    params = default_cohort_params(n_windows=5)
    assert [p.patient_id for p in params] == [f"P{i:02d}" for i in range(1, 12)]
    profiles = [dict(p.metadata)["discharge_profile"] for p in params]
    assert profiles == [i % 3 for i in range(11)]
    # one cluster's SOZ width is the next cluster's propagated width
    widths = [(p.spike_width_ms / p.propagated_width_ms) for p in params]
    np.testing.assert_allclose(widths, 0.5)
    for p, c in zip(params, profiles):
        ar, tilt = BACKGROUND_PROFILES[c]
        assert abs(p.ar_freq_hz / ar - 1) <= 0.15 and abs(p.spectral_tilt - tilt) <= 0.1
    cohort = synth_cohort(params)
    assert cohort.N == 11 and all(r.class_counts() == {"soz": 5, "non_soz": 5} for r in cohort)


def test_cohort_generation_is_a_function_of_seed():
    a = synth_cohort(default_cohort_params(n_patients=3, n_windows=4, master_seed=9))
    b = synth_cohort(default_cohort_params(n_patients=3, n_windows=4, master_seed=9))
    c = synth_cohort(default_cohort_params(n_patients=3, n_windows=4, master_seed=10))
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()


def test_synth_params_roundtrip():
    p = default_cohort_params(n_patients=1)[0]
    assert SynthParams.from_dict(json.loads(json.dumps(p.to_dict()))) == p


# records and cohorts

def test_record_validation():
    with pytest.raises(ValueError):
        PatientRecord("P01", 1000, np.zeros((2, 5)), [0, 2])
    with pytest.raises(ValueError):
        PatientRecord("P01", 1000, np.zeros((2, 5)), [0])
    with pytest.raises(ValueError):
        Cohort([PatientRecord("P01", 1000, np.zeros((1, 5)), [0]), PatientRecord("P01", 1000, np.zeros((1, 5)), [1])])


def test_unlabeled_view_has_no_labels():
    r = synth_patient(base_params(n_windows=2))
    u = r.unlabeled()
    assert not hasattr(u, "labels") and u.windows is r.windows


# storage

def small_cohort():
    return synth_cohort(default_cohort_params(n_patients=3, n_windows=6, master_seed=1))


def test_save_load_roundtrip(tmp_path):
    cohort = small_cohort()
    save_cohort(cohort, tmp_path)
    back = load_cohort(tmp_path)
    assert back.patient_ids == cohort.patient_ids
    for a, b in zip(cohort, back):
        assert a.windows.tobytes() == b.windows.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.metadata == b.metadata and a.rate_hz == b.rate_hz
    assert back.fingerprint() == cohort.fingerprint()


def test_manifest_contents(tmp_path):
    save_cohort(small_cohort(), tmp_path)
    raw = (tmp_path / "manifest.json").read_bytes()
    assert b"\r\n" not in raw
    m = json.loads(raw)
    assert m["version"] == 1 and m["n_patients"] == 3 and m["window_len"] == 750
    entry = m["patients"][0]
    assert entry["labels_rle"] == [[1, 6], [0, 6]]
    assert entry["n_soz"] == entry["n_non_soz"] == 6
    assert (tmp_path / "P01.f32").stat().st_size == 12 * 750 * 4


def test_empty_cohort_roundtrips(tmp_path):
    save_cohort(Cohort([]), tmp_path)
    assert load_cohort(tmp_path).N == 0


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestMissingError):
        load_cohort(tmp_path)


def test_window_count_mismatch(tmp_path):
    save_cohort(small_cohort(), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["patients"][1]["n_windows"] += 1
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CohortIntegrityError):
        load_cohort(tmp_path)


def test_truncated_payload(tmp_path):
    save_cohort(small_cohort(), tmp_path)
    path = tmp_path / "P02.f32"
    path.write_bytes(path.read_bytes()[:-750 * 4])
    with pytest.raises(CohortIntegrityError):
        load_cohort(tmp_path)


def test_unknown_version(tmp_path):
    save_cohort(small_cohort(), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(UnsupportedVersionError):
        load_cohort(tmp_path)


def test_save_is_byte_stable(tmp_path):
    save_cohort(small_cohort(), tmp_path / "a")
    save_cohort(small_cohort(), tmp_path / "b")
    for name in ("manifest.json", "P01.f32", "P03.f32"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
