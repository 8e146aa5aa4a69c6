import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from seada.data import (
    DatasetManifest,
    Disease,
    DomainId,
    Sample,
    StoreError,
    Volume,
    load_volume_store,
    make_patient_split,
    normalize_intensity,
    save_volume_store,
    store_hash,
)


def _manifest(n_patients=10, scans=1, n_domains=2, shape=(4, 4, 4), seed=0):
    rng = np.random.default_rng(seed)
    doms = [DomainId(i, f"d{i}") for i in range(n_domains)]
    samples = []
    for p in range(n_patients):
        for _ in range(scans):
            samples.append(Sample(Volume(rng.random(shape).astype(np.float32)), f"p{p}",
                                  Disease.CN if p % 2 else Disease.AD, doms[p % n_domains]))
    return DatasetManifest(samples, tuple(doms[:-1]), tuple(doms[-1:]))


# ---------------------------------------------------------------- normalize


def test_normalize_all_zero_is_noop():
    out = normalize_intensity(np.zeros((4, 4, 4)))
    assert np.array_equal(out, np.zeros((4, 4, 4)))


def test_normalize_hand_computed_2x2x2():
    vol = np.array([-1, 0, 1, 2, 3, 4, 5, 100], float).reshape(2, 2, 2)
    # positive voxels after clamping: 1, 2, 3, 4, 5, 100
    pos = np.array([1, 2, 3, 4, 5, 100], float)
    mean = pos.sum() / 6
    sigma = np.sqrt(((pos - mean) ** 2).sum() / 6)
    top = 4 * sigma  # ~ 143.8, so nothing is clipped from above
    assert top > 100
    expected = np.array([0, 0, 1, 2, 3, 4, 5, 100], float).reshape(2, 2, 2) / top
    np.testing.assert_allclose(normalize_intensity(vol), expected, rtol=0, atol=1e-15)
    # a tighter multiplier does clip the outlier to exactly 1
    out = normalize_intensity(vol, sigma_mult=1.0)
    assert out.reshape(-1)[-1] == 1.0
    np.testing.assert_allclose(out.reshape(-1)[2:7], np.arange(1, 6) / sigma, atol=1e-15)


def test_normalize_max_at_exactly_4_sigma_maps_to_one():
    # foreground {2, 1}: sigma = 0.5, so the maximum sits exactly at 4 sigma
    vol = np.zeros((2, 2, 2))
    vol[0, 0, 0], vol[1, 1, 1] = 2.0, 1.0
    out = normalize_intensity(vol)
    assert out[0, 0, 0] == 1.0
    assert out[1, 1, 1] == 0.5


def test_normalize_rejects_non_finite():
    v = np.ones((2, 2, 2))
    v[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        normalize_intensity(v)
    with pytest.raises(ValueError):
        normalize_intensity(np.ones((2, 2, 2)), sigma_mult=0)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 4, 5), elements=st.floats(-1e3, 1e3)))
def test_normalize_range(vol):
    out = normalize_intensity(vol)
    assert out.min() >= 0.0 and out.max() <= 1.0


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (4, 4, 4), elements=st.floats(0.0, 10.0)), st.floats(0.1, 10.0))
def test_normalize_idempotent_without_upper_clipping(vol, scale):
    # idempotence holds whenever the first pass clipped nothing from above
    vol = vol * scale
    fg = vol[vol > 0]
    if fg.size and fg.std() > 0 and fg.max() > 4 * fg.std():
        return
    once = normalize_intensity(vol)
    twice = normalize_intensity(once)
    assert np.max(np.abs(twice - once)) <= 1e-6


# ---------------------------------------------------------------- split


def test_split_counts_and_disjoint():
    sp = make_patient_split(_manifest(10), 0.8, seed=3)
    assert len(sp.train_ids) == 8 and len(sp.eval_ids) == 2
    assert not sp.train_ids & sp.eval_ids


def test_split_deterministic():
    m = _manifest(10)
    assert make_patient_split(m, 0.8, seed=5) == make_patient_split(m, 0.8, seed=5)


def test_split_is_by_patient():
    m = _manifest(6, scans=5)
    sp = make_patient_split(m, 0.8, seed=0)
    for pid in {s.patient_id for s in m.samples}:
        assert (pid in sp.train_ids) != (pid in sp.eval_ids)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 30), st.floats(0.05, 0.95))
def test_split_disjoint_any_seed(seed, n, ratio):
    sp = make_patient_split(_manifest(n, shape=(1, 1, 1)), ratio, seed=seed)
    assert not sp.train_ids & sp.eval_ids
    assert len(sp.train_ids) + len(sp.eval_ids) == n


def test_split_errors():
    with pytest.raises(ValueError):
        make_patient_split(_manifest(1, n_domains=1), 0.8)
    with pytest.raises(ValueError):
        make_patient_split(_manifest(4), 1.0)


# ---------------------------------------------------------------- manifest invariants


def test_manifest_rejects_overlapping_domains():
    d = DomainId(0, "a")
    with pytest.raises(ValueError):
        DatasetManifest([], (d,), (d,))


def test_sample_requires_patient_id():
    with pytest.raises(ValueError):
        Sample(Volume(np.zeros((2, 2, 2))), "", Disease.CN, DomainId(0, "a"))


# ---------------------------------------------------------------- store


def test_store_roundtrip_single_sample(tmp_path):
    m = _manifest(1, n_domains=1)
    m = DatasetManifest(m.samples, m.test_domains, ())
    save_volume_store(tmp_path / "s", m)
    back = load_volume_store(tmp_path / "s")
    assert back.samples[0].volume.data.tobytes() == m.samples[0].volume.data.tobytes()
    assert back.samples[0].patient_id == "p0"
    assert back.samples[0].disease == m.samples[0].disease


def test_store_roundtrip_labels_and_domains(tmp_path):
    m = _manifest(9, n_domains=3)
    save_volume_store(tmp_path / "s", m)
    back = load_volume_store(tmp_path / "s")
    assert back.num_domains == 3
    header = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert len(header["domains"]) == 3 and header["schema_version"] == 1
    for a, b in zip(m.samples, back.samples):
        assert (a.patient_id, a.disease, a.domain) == (b.patient_id, b.disease, b.domain)
        assert np.array_equal(a.volume.data, b.volume.data)
    assert [d.index for d in back.test_domains] == [2]


def test_store_truncated_file_names_sample(tmp_path):
    m = _manifest(3)
    save_volume_store(tmp_path / "s", m)
    f = tmp_path / "s" / "volumes" / "00001.f32"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(StoreError, match="sample 1"):
        load_volume_store(tmp_path / "s")


def test_store_corrupt_header(tmp_path):
    m = _manifest(2)
    save_volume_store(tmp_path / "s", m)
    (tmp_path / "s" / "manifest.json").write_text("{not json")
    with pytest.raises(StoreError, match="corrupt"):
        load_volume_store(tmp_path / "s")


def test_store_shape_mismatch_on_save(tmp_path):
    m = _manifest(2)
    m.samples[1] = Sample(Volume(np.zeros((3, 3, 3))), "px", Disease.CN, m.samples[1].domain)
    with pytest.raises(StoreError, match="px"):
        save_volume_store(tmp_path / "s", m)


def test_store_hash_stable(tmp_path):
    m = _manifest(4)
    save_volume_store(tmp_path / "a", m)
    save_volume_store(tmp_path / "b", m)
    assert store_hash(tmp_path / "a") == store_hash(tmp_path / "b")
