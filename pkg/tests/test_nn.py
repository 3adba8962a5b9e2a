import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hamdpo import nn
from hamdpo.autodiff import parameters


def scripted_forward(weights, biases, x):
    """Plain-Python forward pass, no numpy linear algebra."""
    h = list(x)
    for k, (W, b) in enumerate(zip(weights, biases)):
        out = []
        for j in range(W.shape[1]):
            acc = float(b[j])
            for i in range(W.shape[0]):
                acc += h[i] * float(W[i, j])
            out.append(math.tanh(acc) if k < len(weights) - 1 else acc)
        h = out
    return h


def zero_policy(kind, obs_dim=3, size=4, bias=0.0):
    p = nn.init_policy(obs_dim, ("discrete" if kind == "categorical" else "continuous", size), 0, hidden=(5,))
    arrays = [np.zeros_like(a) for a in p.arrays()]
    arrays[-1] = arrays[-1] + bias
    return p.with_arrays(arrays)


def random_cat(rng, k=4, batch=None):
    shape = (k,) if batch is None else (batch, k)
    return nn.categorical(rng.standard_normal(shape))


def random_gauss(rng, d=2, batch=None):
    shape = (d,) if batch is None else (batch, d)
    return nn.diag_gaussian(rng.standard_normal(shape), rng.uniform(-1, 0.5, d))


# -- forward passes ---------------------------------------------------------


def test_zero_categorical_is_uniform():
    dist = nn.policy_forward(zero_policy("categorical"), np.array([0.3, -1.0, 2.0]))
    np.testing.assert_array_equal(dist.logits.data, 0.0)
    np.testing.assert_allclose(dist.probs, 0.25)


def test_zero_gaussian_mean_and_log_std():
    dist = nn.policy_forward(zero_policy("gaussian", size=2, bias=-0.7), np.ones(3))
    np.testing.assert_array_equal(dist.mean.data, 0.0)
    np.testing.assert_array_equal(dist.log_std.data, -0.7)


def test_policy_forward_matches_scripted():
    rng = np.random.default_rng(3)
    p = nn.init_policy(4, ("discrete", 3), 1, hidden=(8, 8))
    p = p.with_arrays([a + 0.3 * rng.standard_normal(a.shape) for a in p.arrays()])
    x = rng.standard_normal(4)
    dist = nn.policy_forward(p, x)
    ref = scripted_forward(p.mlp.weights, p.mlp.biases, x)
    np.testing.assert_allclose(dist.logits.data, ref, rtol=0, atol=1e-13)


def test_policy_forward_batch_and_dim_check():
    p = nn.init_policy(4, ("continuous", 2), 1, hidden=(8,))
    xs = np.random.default_rng(0).standard_normal((5, 4))
    batch = nn.policy_forward(p, xs)
    for i in range(5):
        np.testing.assert_allclose(nn.policy_forward(p, xs[i]).mean.data, batch.mean.data[i], atol=1e-15)
    with pytest.raises(ValueError):
        nn.policy_forward(p, np.ones(3))


def test_value_forward():
    v = nn.init_value(3, 0, hidden=(6, 6))
    zero = nn.value_with_arrays(v, [np.zeros_like(a) for a in nn.value_arrays(v)])
    assert nn.value_forward(zero, np.ones(3)) == 0.0
    rng = np.random.default_rng(2)
    x = rng.standard_normal(3)
    assert nn.value_forward(v, x) == pytest.approx(scripted_forward(v.weights, v.biases, x)[0], abs=1e-13)


def test_value_regression_to_constant():
    rng = np.random.default_rng(0)
    v = nn.init_value(2, 1, hidden=(64, 64))
    xs = rng.uniform(-1, 1, (32, 2))
    c = 2.5
    arrays = nn.value_arrays(v)

    def loss(leaves):
        err = nn.value_forward(v, xs, leaves) - c
        return (err * err).mean()

    for _ in range(1000):
        _, g = nn.loss_and_grad(loss, arrays)
        arrays = nn.unflatten(nn.flatten(arrays) - 0.2 * g, arrays)
    out = nn.value_forward(nn.value_with_arrays(v, arrays), xs)
    assert np.max(np.abs(out - c)) <= abs(c) * 1e-2


# -- log-probabilities ---------------------------------------------------------


def test_log_prob_uniform_categorical():
    lp = nn.log_prob(nn.categorical(np.zeros(4)), 2).item()
    assert lp == pytest.approx(-math.log(4), abs=1e-15)
    assert lp == pytest.approx(-1.38629, abs=1e-5)


def test_log_prob_standard_normal_mode():
    lp = nn.log_prob(nn.diag_gaussian(np.zeros(3), np.zeros(3)), np.zeros(3)).item()
    assert lp == pytest.approx(-1.5 * math.log(2 * math.pi), abs=1e-14)


def test_log_prob_invalid_index():
    with pytest.raises(ValueError):
        nn.log_prob(nn.categorical(np.zeros(3)), 3)
    with pytest.raises(ValueError):
        nn.log_prob(nn.diag_gaussian(np.zeros(2), np.zeros(2)), np.zeros(3))


def test_log_prob_normalizes():
    rng = np.random.default_rng(5)
    cat = random_cat(rng, 5)
    total = sum(math.exp(nn.log_prob(cat, a).item()) for a in range(5))
    assert total == pytest.approx(1.0, abs=1e-12)
    g = nn.diag_gaussian(np.array([0.4]), np.array([-0.3]))
    grid = np.linspace(-10, 10, 20001)
    dens = np.exp(nn.log_prob(g, grid[:, None]).data)
    assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)


# -- KL -----------------------------------------------------------------------


def test_kl_worked_example():
    p = nn.categorical(np.log([0.5, 0.5]))
    q = nn.categorical(np.log([0.25, 0.75]))
    assert nn.kl_closed_form(p, q).item() == pytest.approx(0.14384, abs=1e-5)
    assert nn.kl_closed_form(p, q).item() == pytest.approx(
        0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-15
    )


def test_kl_self_is_zero():
    rng = np.random.default_rng(0)
    for d in (random_cat(rng), random_gauss(rng)):
        assert abs(nn.kl_closed_form(d, d).item()) < 1e-12


def test_kl_family_mismatch():
    with pytest.raises(TypeError):
        nn.kl_closed_form(nn.categorical(np.zeros(2)), nn.diag_gaussian(np.zeros(2), np.zeros(2)))


def test_gaussian_kl_matches_monte_carlo():
    rng = np.random.default_rng(1)
    p, q = random_gauss(rng, 2), random_gauss(rng, 2)
    x = p.mean.data + p.std * rng.standard_normal((1_000_000, 2))
    diff = nn.log_prob(p, x).data - nn.log_prob(q, x).data
    se = diff.std(ddof=1) / math.sqrt(len(diff))
    assert abs(diff.mean() - nn.kl_closed_form(p, q).item()) < 3 * se


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(2, 6))
def test_kl_nonnegative(seed, k):
    rng = np.random.default_rng(seed)
    assert nn.kl_closed_form(random_cat(rng, k), random_cat(rng, k)).item() >= -1e-15
    assert nn.kl_closed_form(random_gauss(rng, k), random_gauss(rng, k)).item() >= -1e-15


@pytest.mark.parametrize("kind", ["discrete", "continuous"])
def test_kl_gradient_vanishes_at_old_params(kind):
    p = nn.init_policy(3, (kind, 3), 4, hidden=(16, 16))
    rng = np.random.default_rng(0)
    p = p.with_arrays([a + 0.2 * rng.standard_normal(a.shape) for a in p.arrays()])
    obs = rng.standard_normal((50, 3))
    old = nn.policy_forward(p, obs)
    _, g = nn.loss_and_grad(lambda leaves: nn.kl_closed_form(nn.policy_forward(p, obs, leaves), old).mean(), p.arrays())
    assert np.linalg.norm(g) < 1e-8


# -- sampling -------------------------------------------------------------------


def test_sample_point_mass():
    rng = np.random.default_rng(0)
    d = nn.categorical(np.log(np.array([1e-300, 1e-300, 1.0, 1e-300])))
    assert all(nn.sample(d, rng) == 2 for _ in range(200))


def test_sample_tiny_variance_is_clamped():
    d = nn.diag_gaussian(np.array([0.5, -1.0]), np.array([-20.0, -20.0]))
    np.testing.assert_array_equal(d.log_std.data, -5.0)
    xs = nn.sample(nn.diag_gaussian(np.tile([0.5, -1.0], (10_000, 1)), np.full(2, -20.0)), np.random.default_rng(1))
    assert np.all(np.abs(xs - np.array([0.5, -1.0])) <= 5 * math.exp(-5))


def test_sample_uniform_frequencies():
    k, n = 4, 100_000
    d = nn.categorical(np.zeros((n, k)))
    draws = nn.sample(d, np.random.default_rng(2))
    freq = np.bincount(draws, minlength=k) / n
    sigma = math.sqrt((1 / k) * (1 - 1 / k) / n)
    assert np.all(np.abs(freq - 1 / k) < 4 * sigma)


def test_sample_deterministic_given_stream():
    d = random_gauss(np.random.default_rng(0), 3, batch=4)
    a = nn.sample(d, np.random.default_rng(9))
    b = nn.sample(d, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("kind", ["cat", "gauss"])
def test_sample_log_likelihood_is_negative_entropy(kind):
    rng = np.random.default_rng(4)
    n = 200_000
    if kind == "cat":
        d = nn.categorical(np.tile(rng.standard_normal(5), (n, 1)))
    else:
        d = nn.diag_gaussian(np.tile(rng.standard_normal(2), (n, 1)), rng.uniform(-1, 0.5, 2))
    lp = nn.log_prob(d, nn.sample(d, rng)).data
    se = lp.std(ddof=1) / math.sqrt(n)
    assert abs(lp.mean() + nn.entropy(d)[0]) < 4 * se


# -- gradients -------------------------------------------------------------------


def test_backward_matches_finite_differences_random_mlp():
    rng = np.random.default_rng(7)
    p = nn.init_policy(3, ("continuous", 2), 0, hidden=(6, 5))
    p = p.with_arrays([a + 0.3 * rng.standard_normal(a.shape) for a in p.arrays()])
    obs = rng.standard_normal((7, 3))
    acts = rng.standard_normal((7, 2))

    def loss(leaves):
        return nn.log_prob(nn.policy_forward(p, obs, leaves), acts).mean()

    _, g = nn.loss_and_grad(loss, p.arrays())
    base = p.flat()
    fd = np.zeros_like(base)
    h = 1e-6
    for i in range(len(base)):
        e = np.zeros_like(base)
        e[i] = h
        f = lambda v: nn.log_prob(nn.policy_forward(p.unflatten(v), obs), acts).data.mean()
        fd[i] = (f(base + e) - f(base - e)) / (2 * h)
    rel = np.abs(g - fd) / np.maximum(1.0, np.abs(fd))
    assert rel.max() < 1e-5


def test_flatten_roundtrip():
    p = nn.init_policy(3, ("continuous", 2), 0, hidden=(4,))
    q = p.unflatten(p.flat() * 2.0)
    np.testing.assert_array_equal(q.flat(), p.flat() * 2.0)
    with pytest.raises(ValueError):
        p.unflatten(np.zeros(3))


def test_backward_resets_leaf_gradients():
    leaves = parameters([np.array([1.0, 2.0])])
    loss = (leaves[0] * leaves[0]).sum()
    g1 = nn.backward(loss, leaves)
    g2 = nn.backward((leaves[0] * leaves[0]).sum(), leaves)
    np.testing.assert_array_equal(g1, g2)


# -- checkpoints -------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["discrete", "continuous"])
def test_checkpoint_bit_exact(tmp_path, kind):
    p = nn.init_policy(5, (kind, 3), 11, hidden=(7, 4))
    p = p.with_arrays([a + np.random.default_rng(0).standard_normal(a.shape) for a in p.arrays()])
    nn.save_policy(tmp_path / "p.npz", p)
    back = nn.load_policy(tmp_path / "p.npz")
    assert back.kind == p.kind and back.mlp.layer_sizes == p.mlp.layer_sizes
    assert back.flat().tobytes() == p.flat().tobytes()
