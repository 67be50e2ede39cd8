import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcpr import checks
from pcpr.encoder import (
    Encoder,
    EncoderConfig,
    forward,
    init_params,
    load_params,
    save_params,
    snapshot,
)
from pcpr.errors import ConfigMismatch, FormatError, NonFiniteActivation, StaleCache

SMALL = EncoderConfig(hidden_dims=(8, 16), descriptor_dim=4, seed=3)


def cloud(seed, n=16):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 3))


def test_init_deterministic_and_biases_zero():
    a, b = init_params(SMALL), init_params(SMALL)
    assert a == b
    assert all(not bias.any() for bias in a.biases)
    for w in a.weights:
        assert np.abs(w).max() <= 1 / np.sqrt(w.shape[0])


def test_param_count():
    assert EncoderConfig(hidden_dims=(4,), descriptor_dim=2).num_params == 26
    assert init_params(EncoderConfig(hidden_dims=(4,), descriptor_dim=2)).theta.size == 26


def test_reversed_points_same_descriptor():
    p = init_params(SMALL)
    c = cloud(0)
    assert np.array_equal(forward(p, [c]), forward(p, [c[::-1]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(8, 40))
def test_permutation_invariance(seed, n):
    p = init_params(SMALL)
    c = cloud(seed, n)
    perm = np.random.default_rng(seed + 1).permutation(n)
    assert np.array_equal(forward(p, [c]), forward(p, [c[perm]]))


def test_zero_final_layer_returns_bias():
    p = init_params(SMALL)
    p.weights[-1][...] = 0.0
    p.biases[-1][...] = [1.0, -2.0, 3.0, 0.5]
    out = forward(p, [cloud(1), cloud(2, 9)])
    assert np.array_equal(out, np.tile([1.0, -2.0, 3.0, 0.5], (2, 1)))


def test_duplicated_point_count_irrelevant():
    p = init_params(SMALL)
    pt = np.array([[0.3, -0.2, 0.7]])
    assert np.array_equal(forward(p, [np.repeat(pt, 8, 0)]), forward(p, [np.repeat(pt, 16, 0)]))


def test_ragged_batch_matches_individual():
    p = init_params(SMALL)
    clouds = [cloud(3, 10), cloud(4, 20)]
    batched = forward(p, clouds)
    for i, c in enumerate(clouds):
        # batch shape only changes BLAS summation order
        np.testing.assert_allclose(batched[i], forward(p, [c])[0], rtol=1e-12, atol=1e-15)


def test_matches_loop_reference():
    p = init_params(SMALL)
    clouds = [cloud(5), cloud(6)]
    np.testing.assert_allclose(forward(p, clouds), checks._plain_forward(p, clouds), rtol=1e-13, atol=1e-14)


def test_nonfinite_raises():
    p = init_params(SMALL)
    p.theta[0] = np.inf
    with pytest.raises(NonFiniteActivation):
        forward(p, [cloud(0)])


def test_zero_upstream_zero_gradient():
    enc = Encoder(init_params(SMALL))
    c = [cloud(0)]
    enc.forward(c)
    assert not enc.backward(c, np.zeros((1, 4))).any()


def test_backward_fd_small():
    cfg = EncoderConfig(hidden_dims=(5,), descriptor_dim=3, seed=11)
    p = init_params(cfg)
    p.biases[0][...] = 0.1
    c = [np.random.default_rng(2).uniform(-1, 1, (4, 3))]
    up = np.random.default_rng(3).standard_normal((1, 3))
    assert checks._encoder_kink_gap(p, c) > checks.KINK_GAP
    enc = Encoder(p)
    enc.forward(c)
    analytic = enc.backward(c, up)

    def scalar(theta):
        q = p.copy()
        q.theta[...] = theta
        return float((forward(q, c) * up).sum())

    assert checks.relative_error(analytic, checks.numeric_grad(scalar, p.theta.copy())) < 1e-6


def test_backward_fd_random():
    assert max(checks.gradient_errors("encoder_backward", 20, seed=4)) < 1e-6


def test_tie_goes_to_lowest_index():
    cfg = EncoderConfig(hidden_dims=(3,), descriptor_dim=2, seed=0)
    p = init_params(cfg)
    p.weights[0][...] = np.eye(3)
    pts = np.array([[0.5, 0.5, 0.5]] * 3 + [[0.1, 0.1, 0.1]] * 5)
    enc = Encoder(p)
    enc.forward([pts])
    grad = enc.backward([pts], np.ones((1, 2)))
    g = p.copy()
    g.theta[...] = grad
    # first-layer weight gradient equals point 0 times d_pre, i.e. only one copy counted
    d_pooled = np.ones((1, 2)) @ p.weights[-1].T
    np.testing.assert_allclose(g.weights[0], np.outer(pts[0], d_pooled[0]))


def test_stale_cache():
    enc = Encoder(init_params(SMALL))
    with pytest.raises(StaleCache):
        enc.backward([cloud(0)], np.zeros((1, 4)))
    enc.forward([cloud(0)])
    with pytest.raises(StaleCache):
        enc.backward([cloud(1)], np.zeros((1, 4)))


def test_snapshot_isolation():
    p = init_params(SMALL)
    snap = snapshot(p)
    c = [cloud(7)]
    assert np.array_equal(snap.forward(c), forward(p, c))
    before = snap.params.theta.copy()
    p.theta += 0.5
    assert np.array_equal(snap.params.theta, before)
    assert snapshot(init_params(SMALL)) == snap
    with pytest.raises(ValueError):
        snap.params.theta[0] = 1.0


def test_params_round_trip(tmp_path):
    p = init_params(SMALL)
    p.theta += np.random.default_rng(0).standard_normal(p.theta.size) * 1e-3
    save_params(tmp_path / "w.bin", p)
    q = load_params(tmp_path / "w.bin", SMALL)
    assert q == p and q.theta.tobytes() == p.theta.tobytes()
    assert (tmp_path / "w.bin").read_bytes()[:5] == b"PCPRW"


def test_params_wrong_shape(tmp_path):
    save_params(tmp_path / "w.bin", init_params(SMALL))
    with pytest.raises(ConfigMismatch):
        load_params(tmp_path / "w.bin", EncoderConfig(hidden_dims=(8, 8), descriptor_dim=4))


def test_params_bad_magic(tmp_path):
    path = tmp_path / "w.bin"
    save_params(path, init_params(SMALL))
    path.write_bytes(b"XXXXX" + path.read_bytes()[5:])
    with pytest.raises(FormatError):
        load_params(path)


def test_params_truncated(tmp_path):
    path = tmp_path / "w.bin"
    save_params(path, init_params(SMALL))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_params(path)


@pytest.mark.parametrize("kwargs", [{"in_dim": 4}, {"hidden_dims": ()}, {"descriptor_dim": 1}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        EncoderConfig(**kwargs)
