import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from soz_adapt.mmd import (KernelSpec, WeightTable, compute_weight_table, median_sqdist, mmd2_biased,
                           multiscale_kernel_sum, patient_weights, rbf_kernel_sum, subsample_rows)
from soz_adapt.model import FeatureSet, StageMismatchError

from oracles import mmd2_double_sum

KERNELS = [KernelSpec.rbf(), KernelSpec.multiscale()]


# kernel primitives

def test_rbf_kernel_examples():
    assert rbf_kernel_sum(0.0, [0.3, 1.0, 7.0]) == 3.0
    b = 2.5
    assert rbf_kernel_sum(b * np.log(2), [b]) == pytest.approx(0.5, abs=1e-15)
    d = np.array([0.0, 0.5, 1.0, 4.0])
    assert np.all(np.diff(rbf_kernel_sum(d, [1.0, 2.0])) < 0)


def test_multiscale_kernel_examples():
    assert multiscale_kernel_sum(0.0, [0.2, 0.5, 0.9, 1.3]) == pytest.approx(4.0, abs=1e-15)
    a = 0.7
    assert multiscale_kernel_sum(a * a, [a]) == pytest.approx(0.5, abs=1e-15)
    assert multiscale_kernel_sum(1e12, [0.2, 0.5, 0.9, 1.3]) < 1e-11


def test_kernel_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec(kind="Laplace")
    with pytest.raises(ValueError):
        KernelSpec.rbf(multipliers=())
    with pytest.raises(ValueError):
        KernelSpec.multiscale(scales=(0.5, -1.0))
    spec = KernelSpec.multiscale(scales=(0.1, 2.0))
    assert KernelSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


# estimator

@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.kind)
def test_identical_sets_give_zero(kernel):
    X = np.random.default_rng(0).normal(size=(40, 6))
    assert abs(mmd2_biased(X, X.copy(), kernel, clamp=False)) <= 1e-12


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.kind)
def test_small_sets_match_double_sum(kernel):
    rng = np.random.default_rng(1)
    X, Y = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)) + 0.5
    assert mmd2_biased(X, Y, kernel, clamp=False) == pytest.approx(mmd2_double_sum(X, Y, kernel.kind), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(m=st.integers(2, 20), n=st.integers(2, 20), d=st.integers(1, 5), shift=st.floats(0, 3),
       seed=st.integers(0, 2 ** 20), kind=st.sampled_from(["RBF", "Multiscale"]))
def test_estimator_properties(m, n, d, shift, seed, kind):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(m, d)), rng.normal(size=(n, d)) + shift
    k = KernelSpec(kind=kind)
    raw = mmd2_biased(X, Y, k, clamp=False)
    assert raw >= -1e-9
    assert abs(raw - mmd2_biased(Y, X, k, clamp=False)) <= 1e-12
    assert raw == pytest.approx(mmd2_double_sum(X, Y, kind), abs=1e-10)


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.kind)
def test_separates_shifted_gaussians(kernel):
    rng = np.random.default_rng(0)
    X, X2, Y = rng.normal(size=(500, 8)), rng.normal(size=(500, 8)), rng.normal(2.0, 1.0, size=(500, 8))
    assert mmd2_biased(X, Y, kernel) > 10 * mmd2_biased(X, X2, kernel)


def test_estimator_rejects_bad_input():
    k = KernelSpec.rbf()
    with pytest.raises(ValueError):
        mmd2_biased(np.zeros((4, 3)), np.zeros((4, 2)), k)
    with pytest.raises(ValueError):
        mmd2_biased(np.zeros((1, 3)), np.zeros((4, 3)), k)


def test_median_is_over_distinct_pairs():
    Z = np.array([[0.0], [1.0], [3.0]])
    assert median_sqdist(Z) == 4.0  # pairs: 1, 9, 4


def test_explicit_bandwidths():
    X, Y = np.array([[0.0], [1.0]]), np.array([[2.0], [2.5]])
    k = KernelSpec.rbf(bandwidth_mode="explicit", multipliers=(1.0,))
    kxx = (2 + 2 * np.exp(-1)) / 4
    kyy = (2 + 2 * np.exp(-0.25)) / 4
    kxy = (np.exp(-4) + np.exp(-6.25) + np.exp(-1) + np.exp(-2.25)) / 4
    assert mmd2_biased(X, Y, k) == pytest.approx(kxx + kyy - 2 * kxy, abs=1e-14)


# weights

def test_equal_discrepancies_give_unit_weights():
    table = patient_weights([("A", 0.3), ("B", 0.3), ("C", 0.3)])
    assert [e.weight for e in table.entries] == pytest.approx([1.0, 1.0, 1.0], abs=1e-15)
    table = patient_weights([("A", 0.0), ("B", 0.0)])
    assert [e.weight for e in table.entries] == [1.0, 1.0]


def test_weight_limit():
    table = patient_weights([("A", 0.0), ("B", 1e6)])
    assert table.weight_of("A") == pytest.approx(2.0, abs=1e-12)
    assert table.weight_of("B") == pytest.approx(0.0, abs=1e-12)


def test_weights_reject_empty_and_negative():
    with pytest.raises(ValueError):
        patient_weights([])
    with pytest.raises(ValueError):
        patient_weights([("A", -0.1)])


@settings(max_examples=100)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=12))
def test_weight_table_invariants(values):
    table = patient_weights([(f"P{i}", v) for i, v in enumerate(values)])
    w = np.array([e.weight for e in table.entries])
    assert abs(w.mean() - 1) <= 1e-12
    assert np.all(w > 0)
    order = np.argsort(values, kind="stable")
    # weights never increase as mmd2 increases
    assert np.all(np.diff(w[order]) <= 1e-15)


def features(pid, matrix, model="m"):
    return FeatureSet(pid, np.asarray(matrix, dtype=float), model)


def cluster_features(seed=0, n=60, d=5):
    rng = np.random.default_rng(seed)
    return [features(f"P{i}", rng.normal(loc=i * 0.7, size=(n, d))) for i in range(4)]


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.kind)
def test_copy_of_training_patient_gets_max_weight(kernel):
    train = cluster_features()
    for k in range(4):
        test = features("T", train[k].matrix.copy())
        table = compute_weight_table(train, test, kernel, subsample=1024, seed=0)
        w = np.array([e.weight for e in table.entries])
        assert table.entries[k].mmd2 == 0.0
        assert np.argmax(w) == k and np.sum(w == w.max()) == 1
        assert abs(w.mean() - 1) <= 1e-12


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.kind)
def test_order_equivariance(kernel):
    train = cluster_features(1)
    test = features("T", np.random.default_rng(9).normal(loc=1.0, size=(50, 5)))
    a = compute_weight_table(train, test, kernel, subsample=30, seed=4)
    b = compute_weight_table(train[::-1], test, kernel, subsample=30, seed=4)
    assert {e.patient_id: e.mmd2 for e in a.entries} == {e.patient_id: e.mmd2 for e in b.entries}
    wa, wb = a.as_dict(), b.as_dict()
    assert all(wa[k] == pytest.approx(wb[k], rel=1e-14) for k in wa)  # normaliser summed in a different order
    assert b.patient_ids == [fs.patient_id for fs in train[::-1]]


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.kind)
@pytest.mark.parametrize("scale", [0.1, 1.0, 10.0])
def test_rank_order_is_scale_free(kernel, scale):
    train = cluster_features(2)
    test = features("T", np.random.default_rng(3).normal(loc=1.2, size=(60, 5)))
    base = compute_weight_table(train, test, kernel)
    scaled = compute_weight_table([features(f.patient_id, f.matrix * scale) for f in train],
                                  features("T", test.matrix * scale), kernel)
    rank = lambda t: np.argsort([e.mmd2 for e in t.entries])  # noqa: E731
    np.testing.assert_array_equal(rank(base), rank(scaled))


def test_subsample_is_bounded_and_seeded():
    m = np.arange(5000 * 2, dtype=float).reshape(5000, 2)
    a = subsample_rows(m, 1024, 3, "P01")
    assert a.shape == (1024, 2) and len(np.unique(a[:, 0])) == 1024
    np.testing.assert_array_equal(a, subsample_rows(m, 1024, 3, "P01"))
    assert not np.array_equal(a, subsample_rows(m, 1024, 3, "P02"))
    assert subsample_rows(m[:10], 1024, 3, "P01").shape == (10, 2)


def test_subsample_gram_work_bound(monkeypatch):
    """4640-row sets at the default subsample: each pair touches at most 2048^2 kernel entries."""
    import soz_adapt.mmd as mmd
    calls = []
    original = mmd.pairwise_sqdist

    def counting(X, Y):
        calls.append(len(X) * len(Y))
        return original(X, Y)

    monkeypatch.setattr(mmd, "pairwise_sqdist", counting)
    rng = np.random.default_rng(0)
    train = [features("P1", rng.normal(size=(4640, 4)))]
    compute_weight_table(train, features("T", rng.normal(size=(4640, 4))), KernelSpec.rbf())
    assert calls == [2048 ** 2]


def test_subsample_larger_than_sets_matches_full_estimate():
    train = cluster_features(4, n=30)
    test = features("T", np.random.default_rng(5).normal(size=(30, 5)))
    table = compute_weight_table(train, test, KernelSpec.rbf(), subsample=1024)
    for fs, e in zip(train, table.entries):
        assert e.mmd2 == pytest.approx(mmd2_biased(fs.matrix, test.matrix, KernelSpec.rbf()), abs=1e-15)


def test_table_rejects_mismatches():
    train = cluster_features()
    with pytest.raises(ValueError):
        compute_weight_table(train, features("T", np.zeros((5, 3))), KernelSpec.rbf())
    with pytest.raises(StageMismatchError):
        compute_weight_table(train, features("T", np.zeros((5, 5)), model="other"), KernelSpec.rbf())
    with pytest.raises(ValueError):
        compute_weight_table(train, train[0], KernelSpec.rbf(), subsample=1)


def test_weight_table_json_roundtrip():
    train = cluster_features()
    table = compute_weight_table(train, features("T", train[1].matrix), KernelSpec.multiscale(), seed=7)
    back = WeightTable.from_json(table.to_json())
    assert back.to_json() == table.to_json()
    d = json.loads(table.to_json())
    assert d["kernel"]["kind"] == "Multiscale" and d["seed"] == 7 and d["subsample_size"] == 1024
    assert d["features_fingerprint"] and d["test_patient_id"] == "T"
    assert [p["id"] for p in d["patients"]] == ["P0", "P1", "P2", "P3"]
