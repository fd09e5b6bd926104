import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfpnp.errors import ConfigurationError
from cfpnp.liegeo import CameraIntrinsics, Pose, exp_map, project_points, se3_distance
from cfpnp.objectives import (
    KernelConfig,
    euclidean_energy,
    full_kernel_sum,
    huber_energy,
    huber_rho,
    huber_weights,
    irls_weights,
    kernel_values,
    rkhs_energy,
    scale_at,
    truncation_mask,
    update_scale,
    weighted_ls_value,
)
from cfpnp.solvers import PairResiduals
from cfpnp.spatial import build_index, closest_point_search

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640.0, 480.0)


def instance(seed, n=50, extra=10, noise=1.0):
    rng = np.random.default_rng(seed)
    src = rng.uniform([-1, -1, -0.5], [1, 1, 0.5], size=(n, 3))
    truth = Pose(np.eye(3), [0, 0, 6.0])
    uv, _ = project_points(truth, src, K)
    tgt = np.vstack([uv + rng.normal(scale=noise, size=uv.shape), rng.uniform([0, 0], [640, 480], size=(extra, 2))])
    T = exp_map(np.concatenate([rng.normal(scale=0.05, size=3), rng.normal(scale=0.02, size=3)])) @ truth
    return src, tgt, T


# ---------------------------------------------------------------- euclidean / huber


def test_euclidean_perfect_alignment():
    src, _, _ = instance(0)
    T = Pose(np.eye(3), [0, 0, 6.0])
    uv, _ = project_points(T, src, K)
    corr = closest_point_search(build_index(uv), uv)
    assert euclidean_energy(T, corr, src, uv, K) == 0.0


def test_euclidean_single_pair():
    src = np.array([[0.0, 0.0, 5.0]])
    tgt = np.array([[323.0, 240.0]])
    corr = closest_point_search(build_index(tgt), project_points(Pose.identity(), src, K)[0])
    assert euclidean_energy(Pose.identity(), corr, src, tgt, K) == pytest.approx(9.0)


def test_euclidean_matches_naive_sum():
    src, tgt, T = instance(1)
    uv, _ = project_points(T, src, K)
    corr = closest_point_search(build_index(tgt), uv)
    naive = 0.0
    for i in range(len(src)):
        x = T.rotation @ src[i] + T.translation
        u, v = K.fx * x[0] / x[2] + K.cx, K.fy * x[1] / x[2] + K.cy
        d = ((tgt - [u, v]) ** 2).sum(axis=1)
        naive += d.min()
    assert euclidean_energy(T, corr, src, tgt, K) == pytest.approx(naive, rel=1e-9)


def test_huber_inside_and_outside():
    r = np.array([0.0, 1.0, 5.0, 6.0, -7.0])
    np.testing.assert_allclose(huber_rho(r, 5.0), [0, 1, 25, 35, 45])
    np.testing.assert_allclose(huber_weights(r, 5.0), [1, 1, 1, 5 / 6, 5 / 7])


def test_huber_energy_below_squared():
    src, tgt, T = instance(2)
    corr = closest_point_search(build_index(tgt), project_points(T, src, K)[0])
    assert huber_energy(T, corr, src, tgt, K, delta=2.0) <= euclidean_energy(T, corr, src, tgt, K)


# ---------------------------------------------------------------- kernel energy


def test_coincident_points_give_n():
    src = np.array([[x, y, 5.0] for x in (-0.5, 0.0, 0.5) for y in (-0.3, 0.3)])
    uv, _ = project_points(Pose.identity(), src, K)
    e = rkhs_energy(Pose.identity(), src, build_index(uv), K, KernelConfig(ell=1.0))
    assert e.e_data == pytest.approx(len(src), abs=1e-12)
    assert e.weighted_ls == 0.0 and e.e_init == 0.0


def test_kernel_at_ell_sqrt2():
    src = np.array([[0.0, 0.0, 5.0]])
    ell = 3.0
    tgt = np.array([[320.0 + ell * np.sqrt(2), 240.0]])
    e = rkhs_energy(Pose.identity(), src, build_index(tgt), K, KernelConfig(ell=ell))
    assert e.e_data == pytest.approx(np.exp(-1.0), rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_truncated_close_to_full_sum(seed):
    src, tgt, T = instance(10 + seed, n=30, extra=5)
    for ell in (1.0, 3.0, 8.0):
        trunc = rkhs_energy(T, src, build_index(tgt), K, KernelConfig(ell=ell)).e_data
        full = full_kernel_sum(T, src, tgt, K, ell)
        assert trunc <= full + 1e-12
        assert trunc == pytest.approx(full, rel=0.02)


def test_prior_term():
    src, tgt, T = instance(3)
    anchor = Pose(np.eye(3), [0, 0, 6.0])
    e = rkhs_energy(T, src, build_index(tgt), K, KernelConfig(ell=4.0), prior=anchor)
    assert e.e_init == se3_distance(anchor, T)


def test_irls_weight_values():
    ell = 2.0
    src = np.array([[0.0, 0.0, 5.0], [0.2, 0.0, 5.0]])
    uv, _ = project_points(Pose.identity(), src, K)
    tgt = np.array([uv[0], uv[1] + [2 * ell, 0]])
    w = irls_weights(Pose.identity(), src, build_index(tgt), K, KernelConfig(ell=ell, max_neighbors=1))
    assert w.weight[0, 0] == 1.0
    assert w.weight[1, 0] == pytest.approx(np.exp(-2.0), rel=1e-12)
    np.testing.assert_array_equal(w.target[:, 0], [0, 1])


@pytest.mark.parametrize("seed", range(3))
def test_weights_in_unit_interval(seed):
    src, tgt, T = instance(20 + seed)
    w = irls_weights(T, src, build_index(tgt), K, KernelConfig(ell=5.0))
    used = w.target >= 0
    assert np.all(used[:, 0])
    assert np.all((w.weight[used] > 0) & (w.weight[used] <= 1))
    assert np.all(w.weight[~used] == 0)


def test_weighted_ls_matches_pair_residuals():
    src, tgt, T = instance(4)
    w = irls_weights(T, src, build_index(tgt), K, KernelConfig(ell=6.0))
    a = weighted_ls_value(T, src, tgt, w, K)
    b = PairResiduals(src, w.target, tgt, w.weight, K).cost(T)
    assert a == pytest.approx(b, rel=1e-12)
    # self-weighted value reported by rkhs_energy is the same quantity
    assert rkhs_energy(T, src, build_index(tgt), K, KernelConfig(ell=6.0)).weighted_ls == pytest.approx(a, rel=1e-12)


def test_point_weights():
    src, tgt, T = instance(5)
    pw = np.linspace(0.5, 2.0, len(src))
    idx = build_index(tgt)
    e1 = rkhs_energy(T, src, idx, K, KernelConfig(ell=4.0)).e_data
    e2 = rkhs_energy(T, src, idx, K, KernelConfig(ell=4.0, point_weights=2 * np.ones(len(src)))).e_data
    assert e2 == pytest.approx(2 * e1)
    with pytest.raises(ConfigurationError):
        rkhs_energy(T, src, idx, K, KernelConfig(ell=4.0, point_weights=pw[:3]))


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1e4), st.floats(0, 1e4), st.floats(0.1, 100))
def test_kernel_nonincreasing_in_distance(a, b, ell):
    lo, hi = min(a, b), max(a, b)
    k = kernel_values(np.array([[lo, hi]]), ell)
    assert 0 <= k[0, 1] <= k[0, 0] <= 1


def test_energy_drops_when_a_pair_moves_away():
    # finite perturbation: push one target away from its projected point
    src = np.array([[0.0, 0.0, 5.0], [0.3, 0.1, 5.0]])
    uv, _ = project_points(Pose.identity(), src, K)
    prev = np.inf
    for shift in np.linspace(0, 12, 25):
        tgt = uv + [[shift, 0.0], [0.0, 0.0]]
        e = rkhs_energy(Pose.identity(), src, build_index(tgt), K, KernelConfig(ell=3.0)).e_data
        assert e <= prev
        prev = e


def test_truncation_mask_keeps_slot0():
    idx = np.array([[3, 4, -1], [1, 2, 5]])
    d2 = np.array([[1e6, 1e7, np.inf], [0.5, 8.0, 10.0]])
    m = truncation_mask(idx, d2, ell=1.0, radius_factor=3.0)
    np.testing.assert_array_equal(m, [[True, False, False], [True, True, False]])


# ---------------------------------------------------------------- scale schedule


def test_initial_scale_is_max_distance():
    cfg = update_scale(KernelConfig(), 0, np.array([25.0, 400.0, 100.0]))
    assert cfg.ell == 20.0


def test_scale_halves_every_period():
    d2 = np.array([400.0])
    assert update_scale(KernelConfig(shrink_period=5), 4, d2).ell == 20.0
    assert update_scale(KernelConfig(shrink_period=5), 5, d2).ell == 10.0
    assert update_scale(KernelConfig(shrink_period=5), 5, d2, extra_halvings=1).ell == 5.0
    assert update_scale(KernelConfig(ell_floor=3.0), 40, d2).ell == 3.0


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 1e4), st.integers(1, 10), st.floats(0.01, 5), st.lists(st.integers(0, 1), max_size=60))
def test_scale_nonincreasing(ell0, period, floor, forced):
    extra, prev = 0, np.inf
    for it, f in enumerate(forced):
        extra += f
        ell = scale_at(ell0, it, period, floor, extra)
        assert ell <= prev and ell >= floor
        prev = ell


def test_scale_errors():
    with pytest.raises(ConfigurationError):
        update_scale(KernelConfig(), 0, np.array([]))
    with pytest.raises(ConfigurationError):
        update_scale(KernelConfig(), -1, np.array([1.0]))
    with pytest.raises(ConfigurationError):
        KernelConfig().require_ell()


@pytest.mark.parametrize(
    "kw",
    [dict(ell=0.0), dict(ell_floor=0), dict(lam=-1), dict(shrink_period=0), dict(max_neighbors=0),
     dict(radius_factor=0), dict(prior_scaling="other")],
)
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        KernelConfig(**kw)


def test_prior_weight_scaling():
    assert KernelConfig(lam=0.5).prior_weight(3.0) == pytest.approx(9.0)
    assert KernelConfig(lam=0.5, prior_scaling="literal").prior_weight(3.0) == 0.5
