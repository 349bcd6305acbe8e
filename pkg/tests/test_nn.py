import numpy as np
import pytest

from fedidm.core import make_rng, softmax
from fedidm.nn import (NetParams, NetSpec, RandomFeatureNet, RectifierNet, backward_ce, ce_loss,
                       features, flatten, forward, init_params, one_hot, sgd_epochs, unflatten)
from oracles import central_fd, mlp_forward_loops, rel_err


def test_init_shapes_and_determinism():
    spec = NetSpec((2, 3, 2))
    p = init_params(spec, make_rng(7))
    assert spec.n_params == 17 and flatten(p).size == 17
    assert np.array_equal(flatten(p), flatten(init_params(spec, make_rng(7))))
    assert np.all(init_params(NetSpec((4, 4)), make_rng(3)).biases[0] == 0)
    assert np.all(np.abs(p.weights[0]) <= 1 / np.sqrt(2))


def test_spec_validation():
    with pytest.raises(ValueError):
        NetSpec((3,))
    with pytest.raises(ValueError):
        NetSpec((3, 2), activation="swish")


def test_forward_identity_and_zero():
    spec = NetSpec((2, 2))
    ident = NetParams(spec, (np.eye(2),), (np.zeros(2),))
    np.testing.assert_array_equal(forward(ident, [1.0, 2.0])[0], [[1.0, 2.0]])
    zero = init_params(NetSpec((3, 4, 2)), make_rng(0))
    zero = unflatten(zero.spec, np.zeros(zero.spec.n_params))
    assert np.all(forward(zero, np.ones((5, 3)))[0] == 0)
    with pytest.raises(ValueError):
        forward(ident, np.ones(3))


def test_forward_matches_loop_oracle():
    rng = make_rng(11)
    for _ in range(5):
        spec = NetSpec((4, 6, 5, 3))
        p = init_params(spec, rng)
        p = unflatten(spec, flatten(p) + 0.1 * rng.standard_normal(spec.n_params))
        x = rng.standard_normal((7, 4))
        ref = mlp_forward_loops([W.tolist() for W in p.weights], [b.tolist() for b in p.biases], x)
        np.testing.assert_allclose(forward(p, x)[0], ref, atol=1e-13)


def test_forward_is_pure():
    p = init_params(NetSpec((3, 4, 2)), make_rng(1))
    before = flatten(p).copy()
    forward(p, np.ones((2, 3)))
    backward_ce(p, np.ones((2, 3)), one_hot([0, 1], 2))
    assert np.array_equal(before, flatten(p))


@pytest.mark.parametrize("instance", range(20))
def test_ce_gradient_matches_fd(instance):
    rng = make_rng(100, instance)
    widths = (int(rng.integers(2, 6)), int(rng.integers(2, 7)), int(rng.integers(2, 5)))
    spec = NetSpec(widths)
    p = init_params(spec, rng)
    x = rng.standard_normal((5, widths[0]))
    t = softmax(rng.standard_normal((5, widths[-1])), axis=1)
    _, g = backward_ce(p, x, t)
    num = central_fd(lambda v: ce_loss(unflatten(spec, v), x, t), flatten(p))
    assert rel_err(flatten(g), num) < 1e-4


def test_ce_stationary_at_model_output():
    spec = NetSpec((3, 4))
    p = init_params(spec, make_rng(2))
    x = make_rng(3).standard_normal((1, 3))
    target = softmax(forward(p, x)[0], axis=1)
    _, g = backward_ce(p, x, target)
    assert np.max(np.abs(flatten(g))) < 1e-12


def test_ce_batch_duplicate_equals_single():
    p = init_params(NetSpec((3, 5, 2)), make_rng(4))
    x = make_rng(5).standard_normal((1, 3))
    t = np.array([[0.3, 0.7]])
    _, g1 = backward_ce(p, x, t)
    _, g2 = backward_ce(p, np.vstack([x, x]), np.vstack([t, t]))
    np.testing.assert_allclose(flatten(g1), flatten(g2), atol=1e-15)


def test_ce_rejects_non_simplex_targets():
    p = init_params(NetSpec((2, 2)), make_rng(0))
    with pytest.raises(ValueError):
        backward_ce(p, np.ones((1, 2)), np.array([[0.6, 0.6]]))


def test_flatten_round_trip_bitwise():
    p = init_params(NetSpec((3, 4, 2)), make_rng(9))
    q = unflatten(p.spec, flatten(p))
    assert flatten(q).tobytes() == flatten(p).tobytes()
    other = init_params(NetSpec((3, 4, 2)), make_rng(10))
    assert not np.array_equal(flatten(p), flatten(other))
    with pytest.raises(ValueError):
        unflatten(p.spec, np.zeros(3))


def test_features():
    rng = make_rng(6)
    net = RectifierNet.create(3, 2, rng, hidden=(4,), emb_dim=5)
    zero = net.with_flat(np.zeros(net.flatten().size))
    assert np.all(features(zero, np.ones((2, 3))) == 0)
    x = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(features(net, x), features(net, x))
    phi = RandomFeatureNet(NetSpec((3, 6, 4)), rng)
    # mean of embeddings equals mean of per-point embeddings
    emb = features(phi, x)
    np.testing.assert_allclose(emb.mean(axis=0), np.mean([features(phi, xi)[0] for xi in x], axis=0))
    with pytest.raises(ValueError):
        features(phi, np.ones((1, 5)))


def test_rectifier_heads_share_encoder():
    net = RectifierNet.create(4, 3, make_rng(8), hidden=(6,), emb_dim=5)
    emb, logits, cache = net.forward(np.ones((2, 4)))
    assert emb.shape == (2, 5) and logits.shape == (2, 3)
    np.testing.assert_allclose(net.predict_proba(np.ones((2, 4))).sum(axis=1), 1.0)
    np.testing.assert_allclose(emb, cache.hidden @ net.feat_head.weights[0] + net.feat_head.biases[0])


def test_sgd_epochs_reduces_loss():
    rng = make_rng(12)
    x = np.vstack([rng.normal(-2, 1, (30, 2)), rng.normal(2, 1, (30, 2))])
    t = one_hot(np.repeat([0, 1], 30), 2)
    p = init_params(NetSpec((2, 8, 2)), rng)
    q = sgd_epochs(p, x, t, 5, 0.1, 16, make_rng(13))
    assert ce_loss(q, x, t) < ce_loss(p, x, t)
    same = sgd_epochs(p, x, t, 0, 0.1, 16, make_rng(13))
    assert np.array_equal(flatten(same), flatten(p))
