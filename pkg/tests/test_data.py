import math
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pcpr.data import (
    DomainDataset,
    GeoLocation,
    Sample,
    SyntheticDomainSpec,
    ThresholdSpec,
    apply_rigid,
    augment,
    generate_domain,
    load_dataset,
    mine_pairs,
    normalize_cloud,
    read_cloud,
    save_dataset,
    unmatched_queries,
    write_cloud,
)
from pcpr.errors import DegenerateCloud, FormatError, InvalidSpec, MissingIndexEntry

SMALL = SyntheticDomainSpec(seed=3, num_places=6, revisit_count=2, points_per_cloud=16)


def _sample(sid, x, y, domain=0):
    cloud = np.linspace(-1, 1, 24).reshape(8, 3)
    return Sample(cloud, GeoLocation(x, y), domain, sid)


# -- normalize_cloud ----------------------------------------------------------


def test_normalize_unit_max_and_shape_preserved():
    base = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0], [0, 0, 2]], dtype=float)
    raw = np.concatenate([base, base])
    out = normalize_cloud(raw)
    assert np.abs(out).max() == 1.0
    # uniform scaling: pairwise distance ratios unchanged
    d_in = np.linalg.norm(raw[:, None] - raw[None], axis=-1)
    d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
    np.testing.assert_allclose(d_out, d_in * (d_out.max() / d_in.max()), rtol=1e-12)


def test_normalize_identity_up_to_centering():
    rng = np.random.default_rng(0)
    raw = rng.uniform(-0.5, 0.5, (10, 3))
    raw[0, 0], raw[1, 0] = -1.0, 1.0
    out = normalize_cloud(raw)
    shift = (raw.min(axis=0) + raw.max(axis=0)) / 2
    np.testing.assert_allclose(out, raw - shift, atol=1e-15)


def test_normalize_collinear():
    raw = np.zeros((8, 3))
    raw[:, 0] = np.linspace(0, 10, 8)
    out = normalize_cloud(raw)
    # midpoint 5, half extent 5
    np.testing.assert_allclose(out[:, 0], (raw[:, 0] - 5) / 5)
    assert np.all(out[:, 1:] == 0)
    assert out[0, 0] == -1 and out[-1, 0] == 1


@pytest.mark.parametrize("raw", [np.ones((8, 3)), np.zeros((7, 3)), np.zeros((0, 3))])
def test_normalize_rejects_degenerate(raw):
    with pytest.raises(DegenerateCloud):
        normalize_cloud(raw)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(8, 40), st.just(3)), elements=st.floats(-1e3, 1e3)))
def test_normalize_idempotent(raw):
    if np.ptp(raw, axis=0).max() < 1e-6:
        return
    once = normalize_cloud(raw)
    np.testing.assert_allclose(normalize_cloud(once), once, atol=1e-12)
    assert np.abs(once).max() <= 1.0


# -- mine_pairs ---------------------------------------------------------------


def test_mine_pairs_inside_radius():
    idx = mine_pairs([_sample(0, 0, 0), _sample(1, 5, 0)], ThresholdSpec(10, 50, 25))
    assert list(idx.positives[0]) == [1] and list(idx.positives[1]) == [0]


def test_mine_pairs_band_is_unlabeled():
    idx = mine_pairs([_sample(0, 0, 0), _sample(1, 30, 0)], ThresholdSpec(10, 50, 25))
    assert len(idx.positives[0]) == 0
    assert len(idx.negatives(0)) == 0


def _brute_force_pairs(locs, spec):
    pos, neg = [], []
    for i, a in enumerate(locs):
        p, n = [], []
        for j, b in enumerate(locs):
            d = math.dist(a, b)
            if j != i and d < spec.pos_train:
                p.append(j)
            if d > spec.neg_train:
                n.append(j)
        pos.append(p)
        neg.append(n)
    return pos, neg


def test_mine_pairs_grid_matches_brute_force():
    locs = [(20.0 * i, 20.0 * j) for i in range(3) for j in range(3)]
    spec = ThresholdSpec(10, 15, 25)
    idx = mine_pairs([_sample(k, *xy) for k, xy in enumerate(locs)], spec)
    pos, neg = _brute_force_pairs(locs, spec)
    for i in range(9):
        assert list(idx.positives[i]) == pos[i] == []
        assert list(idx.negatives(i)) == neg[i]
        # every other grid point is at >= 20 m, beyond neg_train
        assert neg[i] == [j for j in range(9) if j != i]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100)), min_size=2, max_size=25))
def test_mine_pairs_symmetric_and_matches_brute_force(locs):
    spec = ThresholdSpec(10, 30, 25)
    idx = mine_pairs([_sample(k, *xy) for k, xy in enumerate(locs)], spec)
    pos, neg = _brute_force_pairs(locs, spec)
    for i in range(len(locs)):
        assert list(idx.positives[i]) == pos[i]
        assert list(idx.negatives(i)) == neg[i]
        for j in idx.positives[i]:
            assert i in idx.positives[j]


def test_mine_pairs_tree_path_matches_brute_force(monkeypatch):
    import pcpr.data as data

    rng = np.random.default_rng(1)
    locs = rng.uniform(0, 200, (60, 2))
    samples = [_sample(k, *xy) for k, xy in enumerate(locs)]
    spec = ThresholdSpec(10, 30, 25)
    brute = mine_pairs(samples, spec)
    monkeypatch.setattr(data, "BRUTE_FORCE_LIMIT", 10)
    tree = mine_pairs(samples, spec)
    for i in range(len(samples)):
        assert np.array_equal(brute.positives[i], tree.positives[i])
        assert np.array_equal(brute.negatives(i), tree.negatives(i))


# -- generate_domain ----------------------------------------------------------


def test_generate_domain_deterministic():
    a, b = generate_domain(SMALL), generate_domain(SMALL)
    assert a == b
    for x, y in zip(a.all_samples(), b.all_samples()):
        assert x.cloud.tobytes() == y.cloud.tobytes()


def test_generate_domain_counts():
    ds = generate_domain(SyntheticDomainSpec(seed=1, num_places=32, revisit_count=3, points_per_cloud=16))
    assert len(ds.test_queries) == 32 * (3 - 1)
    assert len(ds.test_database) == 32
    assert len(ds.train) == 32 * 3


def test_generate_domain_zero_noise_is_pure_rotation():
    ds = generate_domain(SyntheticDomainSpec(seed=2, num_places=4, revisit_count=2, noise_sigma=0.0, points_per_cloud=32))
    for q, db in zip(ds.test_queries, ds.test_database):
        a, b = db.cloud, q.cloud
        assert np.array_equal(a[:, 2], b[:, 2])
        # best yaw aligning a onto b (points keep their order)
        angle = math.atan2(
            (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]).sum(), (a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]).sum()
        )
        c, s = math.cos(angle), math.sin(angle)
        rotated = np.stack([c * a[:, 0] - s * a[:, 1], s * a[:, 0] + c * a[:, 1]], axis=1)
        np.testing.assert_allclose(rotated, b[:, :2], atol=1e-6)


def test_generated_queries_all_have_matches_and_splits_disjoint():
    ds = generate_domain(SMALL)
    assert unmatched_queries(ds) == []
    train = {s.sample_id for s in ds.train}
    test = {s.sample_id for s in ds.test_queries + ds.test_database}
    assert not train & test
    for s in ds.all_samples():
        assert np.abs(s.cloud).max() <= 1.0
        assert np.array_equal(s.cloud.astype(np.float32).astype(np.float64), s.cloud)


def test_generated_same_place_visits_are_positives():
    ds = generate_domain(SMALL)
    idx = mine_pairs(ds.train, ds.thresholds)
    assert all(len(p) == SMALL.revisit_count - 1 for p in idx.positives)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"num_places": 1},
        {"revisit_count": 1},
        {"landmark_scale": 0.0},
        {"dynamic": ("colour",)},
        {"dynamic": ("size",), "shared": ("size",)},
    ],
)
def test_invalid_spec(kwargs):
    with pytest.raises(InvalidSpec):
        SyntheticDomainSpec(**kwargs)


def test_generate_rejects_crowded_area():
    with pytest.raises(InvalidSpec):
        generate_domain(SyntheticDomainSpec(num_places=36, area_side=100.0))


# -- augment ------------------------------------------------------------------


def test_flip_twice_is_identity():
    cloud = generate_domain(SMALL).train[0].cloud
    once = apply_rigid(cloud, 0.0, flip_x=True)
    assert np.array_equal(apply_rigid(once, 0.0, flip_x=True), cloud)


def test_zero_rotation_no_flip_is_identity():
    cloud = generate_domain(SMALL).train[0].cloud
    assert np.array_equal(apply_rigid(cloud), cloud)


def test_quarter_turn():
    pts = np.array([[1.0, 0.0, 0.0]] * 8)
    out = apply_rigid(pts, math.pi / 2)
    np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]] * 8, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_augment_is_rigid(seed):
    cloud = generate_domain(SMALL).train[seed % 6].cloud
    out = augment(cloud, seed)
    d_in = np.linalg.norm(cloud[:, None] - cloud[None], axis=-1)
    d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
    np.testing.assert_allclose(d_out, d_in, atol=1e-9)
    np.testing.assert_allclose(out[:, 2], cloud[:, 2])


def test_augment_deterministic():
    cloud = generate_domain(SMALL).train[0].cloud
    assert np.array_equal(augment(cloud, 5), augment(cloud, 5))


# -- file I/O -----------------------------------------------------------------


def test_round_trip(tmp_path):
    ds = generate_domain(SMALL, domain_id=2, name="alpha", thresholds=ThresholdSpec(10, 20, 10))
    manifest = save_dataset(ds, tmp_path / "alpha")
    back = load_dataset(manifest)
    assert back == ds
    assert load_dataset(tmp_path / "alpha") == ds


def test_cloud_file_layout(tmp_path):
    pts = np.array([[0.5, -0.25, 1.0]] * 8)
    write_cloud(tmp_path / "c.bin", pts)
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:4] == b"PCPR"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 8
    assert len(raw) == 12 + 8 * 12
    assert np.array_equal(read_cloud(tmp_path / "c.bin"), pts)


def test_truncated_cloud_names_file(tmp_path):
    ds = generate_domain(SMALL)
    save_dataset(ds, tmp_path)
    victim = tmp_path / "clouds" / f"{ds.train[0].sample_id}.bin"
    victim.write_bytes(victim.read_bytes()[:-5])
    with pytest.raises(FormatError) as err:
        load_dataset(tmp_path)
    assert str(victim) in str(err.value)
    assert err.value.offset is not None


def test_bad_magic(tmp_path):
    path = tmp_path / "c.bin"
    write_cloud(path, np.zeros((8, 3)))
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(FormatError):
        read_cloud(path)


def test_missing_cloud_file(tmp_path):
    ds = generate_domain(SMALL)
    save_dataset(ds, tmp_path)
    (tmp_path / "clouds" / f"{ds.test_queries[0].sample_id}.bin").unlink()
    with pytest.raises(MissingIndexEntry):
        load_dataset(tmp_path)


def test_loader_warns_on_unmatched_queries(tmp_path):
    ds = generate_domain(SMALL)
    far = [Sample(q.cloud, GeoLocation(q.location.x + 1e5, q.location.y), q.domain_id, q.sample_id) for q in ds.test_queries]
    broken = DomainDataset(ds.name, ds.train, ds.test_database, far, ds.thresholds)
    save_dataset(broken, tmp_path)
    with pytest.warns(UserWarning, match="no database entry"):
        load_dataset(tmp_path)


def test_copied_dataset_directory_loads(tmp_path):
    ds = generate_domain(SMALL)
    save_dataset(ds, tmp_path / "a")
    shutil.copytree(tmp_path / "a", tmp_path / "b")
    assert load_dataset(tmp_path / "b") == ds


def test_default_domains_are_distinct_and_disjoint():
    from pcpr.data import default_domain_specs, default_domains, default_holdout_spec

    domains = default_domains()
    assert [d.name for d in domains] == ["domain-1", "domain-2", "domain-3", "domain-4"]
    assert [d.domain_id for d in domains] == [0, 1, 2, 3]
    for d in domains:
        assert not unmatched_queries(d)
    holdout = default_holdout_spec()
    assert holdout.seed not in {s.seed for s in default_domain_specs()}
