import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfs.gmm import (
    InternalDistribution,
    SelectedPixelSet,
    StarvedClassError,
    fit_class_em,
    fit_em,
    log_density,
    sample,
    select_confident,
)
from sfs.network import forward, init_network


def assert_monotone(trace):
    ll = np.array(trace.log_likelihood)
    assert np.all(np.diff(ll) >= -1e-9), np.diff(ll).min()


def two_clusters(seed=0):
    rng = np.random.default_rng(seed)
    return np.concatenate([rng.normal([0, 0], 0.1, size=(500, 2)), rng.normal([10, 10], 0.1, size=(500, 2))])


def test_two_cluster_recovery():
    w, mu, cov, trace = fit_class_em(two_clusters(), 2, rng=np.random.default_rng(0))
    order = np.argsort(mu[:, 0])
    np.testing.assert_allclose(mu[order], [[0, 0], [10, 10]], atol=0.05)
    np.testing.assert_allclose(w[order], [0.5, 0.5], atol=0.05)
    assert_monotone(trace)


def test_single_component_closed_form():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(300, 4)) @ rng.normal(size=(4, 4))
    reg = 1e-4
    w, mu, cov, _ = fit_class_em(x, 1, reg=reg)
    mean = x.sum(axis=0) / len(x)
    d = x - mean
    sample_cov = d.T @ d / len(x) + reg * np.eye(4)
    assert w[0] == pytest.approx(1.0, abs=1e-12)
    assert np.abs(mu[0] - mean).max() <= 1e-9
    assert np.abs(cov[0] - sample_cov).max() <= 1e-9


def test_fit_em_layout_and_invariants():
    rng = np.random.default_rng(0)
    samples = [rng.normal(k * 3.0, 1.0, size=(60 + 10 * k, 3)) for k in range(3)]
    dist, traces = fit_em(samples, components_per_class=2, reg=1e-3, seed=1)
    assert dist.num_components == 6
    for k in range(3):
        assert dist.weights[dist.class_slice(k)].sum() == pytest.approx(1.0, abs=1e-12)
        assert [dist.component_class(c) for c in range(2 * k, 2 * k + 2)] == [k, k]
    for c in range(6):
        assert np.linalg.eigvalsh(dist.covariances[c]).min() >= 1e-3 - 1e-12
    counts = np.array([len(s) for s in samples])
    np.testing.assert_allclose(dist.class_priors, counts / counts.sum())
    for tr in traces:
        assert_monotone(tr)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 4))
def test_em_log_likelihood_monotone(seed, n_comp, dim):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 3, size=(3, dim))
    x = centers[rng.integers(0, 3, size=120)] + rng.normal(size=(120, dim))
    *_, trace = fit_class_em(x, n_comp, reg=1e-4, rng=rng)
    assert_monotone(trace)


def test_em_reproducible():
    x = two_clusters(1)
    a = fit_class_em(x, 3, rng=np.random.default_rng(5))
    b = fit_class_em(x, 3, rng=np.random.default_rng(5))
    for u, v in zip(a[:3], b[:3]):
        assert u.tobytes() == v.tobytes()


def test_starved_class():
    rng = np.random.default_rng(0)
    with pytest.raises(StarvedClassError) as info:
        fit_em([rng.normal(size=(50, 2)), rng.normal(size=(3, 2))], components_per_class=2)
    assert info.value.classes == [1]


def gaussian_dist(mean, cov, k=1, w=1):
    return InternalDistribution(k, w, np.ones(k * w) / w, np.tile(mean, (k * w, 1)), np.tile(cov, (k * w, 1, 1)))


def test_sample_one_hot_proportions():
    rng = np.random.default_rng(0)
    samples = [rng.normal(k, 1, size=(40, 2)) for k in range(3)]
    dist, _ = fit_em(samples, 2)
    ps = sample(dist, [0, 0, 1], 500, np.random.default_rng(0))
    assert np.all(ps.y == 2)
    assert np.all((ps.components >= 4) & (ps.components < 6))


def test_sample_law_of_large_numbers():
    dist = gaussian_dist(np.zeros(3), np.eye(3))
    ps = sample(dist, [1.0], 10000, np.random.default_rng(0))
    assert np.all(np.abs(ps.z.mean(axis=0)) < 0.05)
    assert np.abs(np.cov(ps.z.T) - np.eye(3)).max() < 0.1


def test_sample_reproducible_and_validated():
    dist = gaussian_dist(np.zeros(2), np.eye(2), k=2)
    a = sample(dist, [0.3, 0.7], 100, np.random.default_rng(1))
    b = sample(dist, [0.3, 0.7], 100, np.random.default_rng(1))
    assert a.z.tobytes() == b.z.tobytes() and np.array_equal(a.y, b.y)
    with pytest.raises(ValueError):
        sample(dist, [0.3, 0.6], 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample(dist, [1.2, -0.2], 10, np.random.default_rng(0))


def test_log_density_standard_normal():
    dist = gaussian_dist(np.zeros(2), np.eye(2))
    assert log_density(dist, np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)


def test_log_density_integrates_to_one():
    rng = np.random.default_rng(0)
    means = np.array([[0.0, 0.0], [2.0, 1.0]])
    covs = np.array([[[1.0, 0.3], [0.3, 0.5]], [[0.4, 0.0], [0.0, 0.8]]])
    dist = InternalDistribution(2, 1, np.ones(2), means, covs, class_priors=np.array([0.4, 0.6]))
    lo, hi = np.array([-6.0, -6.0]), np.array([8.0, 7.0])
    pts = rng.uniform(lo, hi, size=(200000, 2))
    integral = np.exp(log_density(dist, pts)).mean() * np.prod(hi - lo)
    assert abs(integral - 1.0) < 0.05


def test_log_density_unimodal_along_axis():
    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    dist = gaussian_dist(np.array([1.0, -1.0]), cov)
    axis = np.linalg.eigh(cov)[1][:, -1]
    assert log_density(dist, dist.means[0]) >= log_density(dist, dist.means[0] + 10 * axis)


def test_log_density_matches_brute_force():
    rng = np.random.default_rng(2)
    samples = [rng.normal(k, 1, size=(60, 2)) for k in range(2)]
    dist, _ = fit_em(samples, 2)
    z = rng.normal(size=(5, 2))
    props = [0.25, 0.75]
    for point, got in zip(z, log_density(dist, z, props)):
        total = 0.0
        for c in range(4):
            d = point - dist.means[c]
            cov = dist.covariances[c]
            quad = d @ np.linalg.inv(cov) @ d
            norm = 2 * math.pi * math.sqrt(np.linalg.det(cov))
            total += props[c // 2] * dist.weights[c] * math.exp(-0.5 * quad) / norm
        assert got == pytest.approx(math.log(total), abs=1e-9)


def test_select_zero_rho_takes_every_pixel():
    net = init_network(8, 8, 3, latent_dim=3, enc_channels=4)
    x = np.random.default_rng(0).normal(size=(3, 8, 8))
    y = np.random.default_rng(1).integers(0, 3, size=(3, 8, 8))
    sel = select_confident(net, x, y, rho=0.0)
    assert sel.total == y.size
    assert sel.counts == [int((y == k).sum()) for k in range(3)]


def test_select_uniform_net_starves():
    net = init_network(8, 8, 4, zero_classifier=True)
    x = np.random.default_rng(0).normal(size=(2, 8, 8))
    with pytest.raises(StarvedClassError):
        select_confident(net, x, np.zeros((2, 8, 8), dtype=int), rho=0.999)


def test_select_rejects_bad_rho():
    net = init_network(8, 8, 3)
    with pytest.raises(ValueError):
        select_confident(net, np.zeros((1, 8, 8)), np.zeros((1, 8, 8), dtype=int), rho=1.0)


def test_rho_zero_single_component_is_class_mean():
    net = init_network(8, 8, 3, latent_dim=3, enc_channels=4, seed=2)
    x = np.random.default_rng(0).normal(size=(4, 8, 8))
    y = np.random.default_rng(1).integers(0, 3, size=(4, 8, 8))
    dist, _ = fit_em(select_confident(net, x, y, rho=0.0), components_per_class=1)
    latent, _ = forward(net, x)
    for k in range(3):
        np.testing.assert_allclose(dist.means[k], latent[y == k].mean(axis=0), atol=1e-12)


def test_selection_monotone_in_rho(small_net, small_data):
    counts = []
    for rho in (0.0, 0.8, 0.97):
        sel = select_confident(small_net, small_data.source_train.images, small_data.source_train.masks, rho,
                               require_all=False)
        counts.append(sel.total)
    assert counts[0] >= counts[1] >= counts[2]


def test_selected_pixel_set_counts():
    s = SelectedPixelSet([np.zeros((3, 2)), np.zeros((0, 2))], rho=0.5)
    assert s.counts == [3, 0] and s.total == 3
