import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from boosted_ukf.dynamics import J_TRUE, InertiaTriple, RigidBodyState
from boosted_ukf.numerics import RngStream
from boosted_ukf.sensing import (
    ResampleLimitError,
    WeightedDataset,
    build_dataset,
    measure,
    median_labels,
    reference_rates,
    reliability_error,
    sample_inertias,
    zscores,
)


@pytest.fixture(scope="module")
def small_ds():
    return build_dataset(200, 1e-3, RngStream(77))


def test_measure_noiseless_is_exact():
    x = RigidBodyState(np.array([0.6, 0.0, 0.8, 0.0]), np.array([0.1, -0.2, 0.3]))
    m = measure(x, 0.0, 0.0, RngStream(1), t=2.0)
    assert np.array_equal(m.z, np.concatenate([x.q, x.omega]))
    assert m.t == 2.0


@given(st.integers(0, 2**32), st.floats(0.0, 0.5))
def test_measure_quaternion_unit(seed, sigma):
    m = measure(RigidBodyState.at_rest(), sigma, sigma, RngStream(seed))
    assert abs(np.linalg.norm(m.q) - 1.0) < 1e-9


def test_measure_gyro_std():
    r = RngStream(4)
    x = RigidBodyState.at_rest()
    W = np.array([measure(x, 0.0, 0.005, r).omega for _ in range(100_000)])
    assert np.all(np.abs(W.std(axis=0) / 0.005 - 1) < 0.03)


def test_measure_rejects_negative_sigma():
    with pytest.raises(ValueError):
        measure(RigidBodyState.at_rest(), -1.0, 0.0, RngStream(0))


def test_sample_inertias_clt_and_validity():
    J = sample_inertias(2000, RngStream(8))
    bound = 3 * np.array([10.0, 8.0, 7.0]) / np.sqrt(2000)
    assert np.all(np.abs(J.mean(axis=0) - [100.0, 80.0, 70.0]) < bound)
    assert np.all(InertiaTriple.is_valid(J))
    assert np.array_equal(sample_inertias(1, RngStream(3)), sample_inertias(1, RngStream(3)))


def test_sample_inertias_resample_limit():
    # a mean violating the triangle inequality by far can never be accepted
    with pytest.raises(ResampleLimitError):
        sample_inertias(3, RngStream(0), mean=[1000.0, 1.0, 1.0], std=[1e-3] * 3, max_rejections=5)


def test_reliability_error_examples():
    w = np.random.default_rng(0).normal(size=(5, 3))
    assert reliability_error(w, w) == 0.0
    assert reliability_error(w + [0.01, 0, 0], w) == pytest.approx(1e-4, rel=1e-9)
    a = np.array([[1.0, 0, 0], [0, 2.0, 0]])
    assert reliability_error(a, np.zeros((2, 3))) == 2.5
    with pytest.raises(ValueError):
        reliability_error(np.zeros((3, 3)), np.zeros((4, 3)))


@given(st.integers(0, 2**32), st.integers(1, 20))
def test_reliability_error_nonnegative(seed, M):
    r = RngStream(seed)
    a, b = r.normal((M, 3)), r.normal((M, 3))
    assert reliability_error(a, b) > 0
    assert reliability_error(a, a) == 0


def test_labels_and_zscores_examples():
    assert median_labels([1.0, 2.0, 3.0, 4.0]).tolist() == [0, 0, 1, 1]
    assert median_labels([1.0, 2.0, 3.0]).tolist() == [0, 0, 1]  # equal to median -> 0
    z = zscores([1.0, 2.0, 3.0])
    assert z[1] == 0.0


@given(st.lists(st.floats(0, 1e3, allow_nan=False), min_size=2, max_size=60))
def test_label_count_property(e):
    e = np.asarray(e)
    labels = median_labels(e)
    if np.unique(e).size == e.size:
        assert labels.sum() in (e.size // 2, (e.size + 1) // 2)
    assert labels.sum() <= (e.size + 1) // 2
    z = zscores(e)
    if e.std() > 1e-6 * max(e.max(), 1.0):
        assert abs(z.mean()) < 1e-9 and abs(z.std() - 1) < 1e-9


def test_nominal_surrogate_has_zero_error():
    J = np.vstack([J_TRUE.as_array(), [95.0, 82.0, 71.0]])
    ds = build_dataset(2, 0.0, RngStream(1), inertias=J)
    assert ds.e[0] == 0.0 and ds.label[0] == 0
    assert reference_rates().shape == (600, 3)


def test_dataset_splits(small_ds):
    ds = small_ds
    n = len(ds)
    tr, va, te = (ds.indices(s) for s in ("train", "val", "test"))
    assert len(tr) + len(va) + len(te) == n
    assert set(tr).isdisjoint(va) and set(tr).isdisjoint(te) and set(va).isdisjoint(te)
    assert len(va) == 20 and len(te) == 40
    # meta set is the lowest-error tenth
    assert ds.e[va].max() <= ds.e[np.concatenate([tr, te])].min()
    assert np.isclose(ds.weight.sum(), 1.0, atol=1e-9)
    assert abs(ds.z.mean()) < 1e-9 and abs(ds.z.std() - 1) < 1e-9


def test_dataset_byte_identical(small_ds):
    again = build_dataset(200, 1e-3, RngStream(77))
    assert json.dumps(again.to_json()) == json.dumps(small_ds.to_json())


def test_dataset_json_round_trip(small_ds, tmp_path):
    path = tmp_path / "ds.json"
    small_ds.save(path)
    data = json.loads(path.read_text())
    assert {"seed", "sigma", "M", "n"} <= set(data)
    assert set(data["samples"][0]) >= {"Jx", "Jy", "Jz", "e", "z", "label", "weight", "split"}
    back = WeightedDataset.load(path)
    assert np.array_equal(back.J, small_ds.J) and np.array_equal(back.split, small_ds.split)
    assert back.meta["sigma"] == 1e-3


def test_common_random_numbers_across_sigma():
    a = build_dataset(50, 1e-4, RngStream(5))
    b = build_dataset(50, 1e-2, RngStream(5))
    assert np.array_equal(a.J, b.J)
