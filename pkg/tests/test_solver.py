import numpy as np
import pytest

from spdeweak import coefficients as cf
from spdeweak.coefficients import CoefficientBundle, RegularizationParams, drift_G
from spdeweak.errors import InvalidArgument, InvalidState, NumericalFailure
from spdeweak.noise import NoisePath, sample_path
from spdeweak.solver import (
    SchemeParams,
    coupled_terminal_batch,
    moment_probe,
    simulate,
    simulate_coupled,
    step,
    terminal_batch,
)
from spdeweak.spectral import Field, build_grid


def smooth_x0(M):
    return Field.from_function(build_grid(M), lambda x: np.sin(np.pi * x) + 0.3 * np.sin(3 * np.pi * x))


def test_scheme_params_validation_and_horizon():
    p = SchemeParams(0.25 / 64, 64, 16, cf.heat())
    assert p.horizon == 0.25
    assert p.refined(4).steps == 256 and p.refined(4).horizon == 0.25
    assert p.coarsened(8).dt == 0.25 / 8
    with pytest.raises(InvalidArgument):
        p.coarsened(3)
    for bad in [dict(dt=0.0), dict(steps=-1), dict(modes=0)]:
        kw = dict(dt=0.1, steps=2, modes=4, bundle=cf.heat()) | bad
        with pytest.raises(InvalidArgument):
            SchemeParams(**kw)


def test_zero_coefficients_give_pure_resolvent_decay():
    p = SchemeParams(0.01, 20, 8, cf.heat())
    x0 = smooth_x0(8)
    traj = simulate(x0, sample_path(1, 0, 20, 8, 0.01), p)
    r = build_grid(8).resolvent_factors(0.01)
    for n in range(21):
        np.testing.assert_allclose(traj.states[n], r**n * x0.modal, rtol=1e-14, atol=1e-300)


def test_linear_additive_matches_scalar_recursion_exactly():
    c, dt, N, M = 0.5, 0.003, 40, 6
    p = SchemeParams(dt, N, M, cf.linear_additive(c))
    x0 = smooth_x0(M)
    path = sample_path(3, 7, N, M, dt)
    traj = simulate(x0, path, p)
    lam = (np.arange(1, M + 1) * np.pi) ** 2
    for i in range(M):
        a = x0.modal[i]
        for n in range(N):
            a = (a + c * path.increments[n, i]) / (1 + dt * lam[i])
            assert traj.states[n + 1, i] == pytest.approx(a, rel=1e-13, abs=1e-16)


def test_step_without_noise_has_bounded_growth():
    M, dt = 32, 0.01
    bundle = cf.smooth_default()
    burgers_only = CoefficientBundle(cf.zero(), bundle.f2, bundle.sigma, bundle.phi)
    p = SchemeParams(dt, 1, M, bundle)
    x = Field(build_grid(M), modal=np.random.default_rng(4).standard_normal(M) / np.arange(1, M + 1))
    for _ in range(10):
        x_next = step(x, np.zeros(M), p)
        # sup |f1| = 0.5 bounds the reaction part in L2
        bound = x.l2_norm() + dt * 0.5 + dt * drift_G(burgers_only, x).l2_norm()
        assert x_next.l2_norm() <= bound * (1 + 1e-12)
        x = x_next


def test_zero_steps_returns_initial_state():
    p = SchemeParams(0.1, 0, 4, cf.smooth_default())
    x0 = smooth_x0(4)
    traj = simulate(x0, NoisePath(np.zeros((0, 4)), 0.1), p)
    assert traj.states.shape == (1, 4)
    assert np.array_equal(traj.terminal.modal, x0.modal)


def test_initial_state_is_stored_verbatim():
    p = SchemeParams(0.01, 5, 8, cf.smooth_default())
    x0 = smooth_x0(8)
    traj = simulate(x0, sample_path(1, 0, 5, 8, 0.01), p)
    assert np.array_equal(traj.states[0], x0.modal)


def test_terminal_mode_variance_matches_geometric_sum():
    c, N, M = 0.5, 8, 4
    dt = 0.25 / N
    p = SchemeParams(dt, N, M, cf.linear_additive(c))
    x = terminal_batch(p, np.zeros(M), seed=11, indices=np.arange(100_000))
    r = build_grid(M).resolvent_factors(dt)
    k = np.arange(1, N + 1)[:, None]
    expected = c**2 * dt * np.sum(r[None, :] ** (2 * k), axis=0)
    var = x.var(axis=0, ddof=1)
    se = expected * np.sqrt(2 / (x.shape[0] - 1))
    assert np.all(np.abs(var - expected) <= 4 * se)


def test_mild_form_agrees_with_iterated_scheme():
    M, N, dt = 16, 16, 0.01
    p = SchemeParams(dt, N, M, cf.smooth_default())
    traj = simulate(smooth_x0(M), sample_path(2, 0, N, M, dt), p, check_mild=True)
    assert traj.states.shape == (N + 1, M)


def test_path_shape_mismatch_is_rejected():
    p = SchemeParams(0.01, 4, 8, cf.heat())
    with pytest.raises(InvalidArgument):
        simulate(smooth_x0(8), sample_path(1, 0, 5, 8, 0.01), p)
    with pytest.raises(InvalidArgument):
        simulate(smooth_x0(8), sample_path(1, 0, 4, 8, 0.02), p)


def test_retained_noise_is_optional():
    p = SchemeParams(0.01, 4, 8, cf.heat())
    traj = simulate(smooth_x0(8), sample_path(1, 0, 4, 8, 0.01), p, retain_noise=False)
    with pytest.raises(InvalidState):
        traj.require_noise()


def test_nonfinite_state_raises_with_step_index():
    blow = cf.ScalarFunction("blowup", (lambda u: np.exp(50 * np.asarray(u) ** 2),) * 4)
    bundle = CoefficientBundle(blow, cf.zero(), cf.zero(), cf.square())
    p = SchemeParams(1.0, 5, 4, bundle)
    x0 = Field(build_grid(4), modal=[3.0, 0, 0, 0])
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalFailure) as info:
            simulate(x0, NoisePath(np.zeros((5, 4)), 1.0), p)
    assert info.value.step is not None


def test_coupled_r1_gives_identical_outputs():
    p = SchemeParams(0.01, 8, 8, cf.smooth_default())
    fine, coarse = simulate_coupled(smooth_x0(8), sample_path(1, 0, 8, 8, 0.01), 1, p)
    assert np.array_equal(fine.modal, coarse.modal)


def test_coupled_heat_ignores_the_path():
    p = SchemeParams(0.01, 8, 8, cf.heat())
    x0 = smooth_x0(8)
    fine, coarse = simulate_coupled(x0, sample_path(1, 0, 8, 8, 0.01), 4, p)
    g = build_grid(8)
    np.testing.assert_allclose(fine.modal, g.resolvent_factors(0.01) ** 8 * x0.modal, rtol=1e-14)
    np.testing.assert_allclose(coarse.modal, g.resolvent_factors(0.04) ** 2 * x0.modal, rtol=1e-14)


def test_coupled_batch_matches_single_path_simulation():
    p = SchemeParams(0.25 / 32, 32, 8, cf.smooth_default())
    x0 = smooth_x0(8)
    out = coupled_terminal_batch(p, x0.modal, [2, 8], seed=5, indices=np.array([0, 3]))
    for j, i in enumerate([0, 3]):
        path = sample_path(5, i, 32, 8, p.dt)
        for r in (2, 8):
            fine, coarse = simulate_coupled(x0, path, r, p)
            np.testing.assert_allclose(out[1][j], fine.modal, rtol=1e-12, atol=1e-15)
            np.testing.assert_allclose(out[r][j], coarse.modal, rtol=1e-12, atol=1e-15)


def test_coupled_distance_shrinks_with_coarse_step():
    M = 16
    p = SchemeParams(0.25 / 256, 256, M, cf.smooth_default())
    out = coupled_terminal_batch(p, smooth_x0(M).modal, [4, 16, 64], seed=9, indices=np.arange(1000))
    dist = [np.sqrt(np.mean(np.sum((out[r] - out[1]) ** 2, axis=1))) for r in (4, 16, 64)]
    assert dist[0] < dist[1] < dist[2]


def test_terminal_batch_equals_simulate():
    p = SchemeParams(0.01, 10, 8, cf.smooth_default())
    x0 = smooth_x0(8)
    batch = terminal_batch(p, x0.modal, seed=2, indices=np.array([4]), block=3)
    single = simulate(x0, sample_path(2, 4, 10, 8, 0.01), p).terminal
    np.testing.assert_allclose(batch[0], single.modal, rtol=1e-13, atol=1e-16)


def test_moment_probe_deterministic_case_is_exact():
    p = SchemeParams(0.01, 10, 8, cf.heat())
    x0 = smooth_x0(8)
    mean, se = moment_probe(p, x0, 300, 0.0)
    expected = np.sum((build_grid(8).resolvent_factors(0.01) ** 10 * x0.modal) ** 2)
    assert mean == pytest.approx(expected, rel=1e-13)
    assert se == pytest.approx(0.0, abs=1e-15)


def test_moment_probe_additive_case_matches_closed_form():
    c, N, M, dt = 0.5, 16, 8, 0.25 / 16
    p = SchemeParams(dt, N, M, cf.linear_additive(c))
    x0 = smooth_x0(M)
    mean, se = moment_probe(p, x0, 20_000, 0.0)
    r = build_grid(M).resolvent_factors(dt)
    k = np.arange(1, N + 1)[:, None]
    expected = np.sum((r**N * x0.modal) ** 2) + c**2 * dt * np.sum(r[None, :] ** (2 * k))
    assert abs(mean - expected) <= 4 * se


def test_moment_probe_is_stable_under_refinement():
    p = SchemeParams(0.25 / 64, 64, 16, cf.smooth_default())
    x0 = smooth_x0(16)
    a, _ = moment_probe(p, x0, 2000, 0.1)
    b, _ = moment_probe(p.refined(2), x0, 2000, 0.1)
    assert abs(a - b) <= 0.1 * abs(a)


def test_moment_probe_rejects_large_alpha():
    with pytest.raises(InvalidArgument):
        moment_probe(SchemeParams(0.1, 1, 2, cf.heat()), smooth_x0(2), 10, 0.25)


def test_results_do_not_depend_on_thread_count(monkeypatch):
    p = SchemeParams(0.25 / 16, 16, 8, cf.smooth_default())
    x0 = smooth_x0(8)
    results = []
    for threads in ("1", "3", "8"):
        monkeypatch.setenv("SPDE_THREADS", threads)
        results.append(moment_probe(p, x0, 1000, 0.1))
    assert results[0] == results[1] == results[2]


def _regularization_gap(M, eps):
    N, dt = 32, 0.25 / 32
    x0 = smooth_x0(M)
    path = sample_path(1, 0, N, M, dt)
    plain = simulate(x0, path, SchemeParams(dt, N, M, cf.smooth_default())).terminal
    reg = RegularizationParams(eps, eps)
    smoothed = simulate(x0, path, SchemeParams(dt, N, M, cf.smooth_default(), reg)).terminal
    return (smoothed - plain).l2_norm() / plain.l2_norm()


def test_small_regularization_is_continuous():
    assert _regularization_gap(2, 1e-8) <= 1e-6


@pytest.mark.parametrize("M", [8, 32])
def test_regularization_gap_is_linear_in_delta_and_scales_with_top_eigenvalue(M):
    # the gap is first order in delta * lambda_M, so the relative 1e-6 level
    # at delta = 1e-8 only holds for a handful of modes
    lam_top = (M * np.pi) ** 2
    g8, g9 = _regularization_gap(M, 1e-8), _regularization_gap(M, 1e-9)
    assert g8 / g9 == pytest.approx(10, rel=1e-3)
    assert g8 <= 10 * 1e-8 * lam_top
