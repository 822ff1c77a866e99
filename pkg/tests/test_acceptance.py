"""End-to-end acceptance checks.

Each test prints one ``criterion N [PASS|FAIL]`` line; the lines are repeated
in the terminal summary.  The heavy Monte Carlo runs are marked ``slow``.
"""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from spdeweak import coefficients as cf
from spdeweak.cli import malliavin_errors, probe_direction
from spdeweak.estimators import (
    coupled_sweep,
    estimate_u,
    fit_rate,
    regularity_probe,
    strong_levels_from_sweep,
    weak_levels_from_sweep,
)
from spdeweak.noise import sample_path
from spdeweak.solver import SchemeParams, simulate
from spdeweak.spectral import Field, build_grid, hs_norm_frac_resolvent
from spdeweak.variations import (
    duality_check,
    duality_closed_form,
    second_variation_path,
    tangent_path,
    two_sided_components,
    two_sided_second_components,
)

T = 0.25
ORDER_MODES = 64
ORDER_LEVELS = [T / 2**j for j in range(4, 9)]
ORDER_REFERENCE = T / 2048
ORDER_SAMPLES = 20_000


@pytest.fixture(scope="module")
def order_sweep():
    """Shared coupled sweep for the weak and strong order criteria."""
    params_ref = SchemeParams(ORDER_REFERENCE, 2048, ORDER_MODES, cf.smooth_default())
    factors = [round(dt / ORDER_REFERENCE) for dt in ORDER_LEVELS]
    x0 = Field.basis(build_grid(ORDER_MODES), 1)
    return coupled_sweep(params_ref, x0, factors, ORDER_SAMPLES, seed=1)


@pytest.mark.slow
def test_criterion_01_weak_order(order_sweep, criterion):
    fit = fit_rate(weak_levels_from_sweep(order_sweep, ORDER_LEVELS))
    ok = 0.40 <= fit.slope <= 0.60 and fit.r_squared >= 0.95
    criterion(1, "weak order", ok, f"slope {fit.slope:.4f} +- {fit.slope_stderr:.4f} (want [0.40, 0.60]), r^2 {fit.r_squared:.4f} (want >= 0.95)")
    assert ok


@pytest.mark.slow
def test_criterion_02_strong_order(order_sweep, criterion):
    fit = fit_rate(strong_levels_from_sweep(order_sweep, ORDER_LEVELS))
    ok = 0.15 <= fit.slope <= 0.35
    criterion(2, "strong order", ok, f"slope {fit.slope:.4f} +- {fit.slope_stderr:.4f} (want [0.15, 0.35]), r^2 {fit.r_squared:.4f}")
    assert ok


@pytest.mark.slow
def test_criterion_03_linear_additive_closed_form(criterion):
    c, M, N = 0.5, 16, 32
    p = SchemeParams(T / N, N, M, cf.linear_additive(c))
    mean, se = estimate_u(p, Field.zeros(build_grid(M)), 100_000)
    r = 1.0 / (1.0 + p.dt * (np.arange(1, M + 1) * np.pi) ** 2)
    exact = float(np.sum(c**2 * p.dt * r**2 * (1 - r ** (2 * N)) / (1 - r**2)))
    ok = abs(mean - exact) <= 4 * se
    criterion(3, "closed-form oracle", ok, f"|{mean:.8g} - {exact:.8g}| = {abs(mean - exact):.3g}, 4 SE = {4 * se:.3g}")
    assert ok


def test_criterion_04_malliavin_identity(criterion):
    p = SchemeParams(T / 32, 32, 32, cf.smooth_default())
    errs = malliavin_errors(p, seed=1, triples=20, eps=1e-4)
    worst = max(errs)
    ok = len(errs) == 20 and worst <= 1e-5
    criterion(4, "Malliavin identity", ok, f"max relative error {worst:.3e} over 20 triples (want <= 1e-5)")
    assert ok


def test_criterion_05_two_sided_decomposition(criterion):
    M, N = 32, 64
    g = build_grid(M)
    p = SchemeParams(T / N, N, M, cf.smooth_default())
    x0 = Field.basis(g, 1)
    h = Field.from_function(g, lambda x: x * (1 - x))
    k = Field.from_function(g, lambda x: np.sin(2 * np.pi * x) + 0.5 * np.cos(3 * np.pi * x) * np.sin(np.pi * x))
    r = g.resolvent_factors(p.dt)
    worst_eta = worst_zeta = 0.0
    for index in range(3):
        traj = simulate(x0, sample_path(7, index, N, M, p.dt), p)
        eta = tangent_path(traj, h)[-1]
        one, two = two_sided_components(traj, h)
        worst_eta = max(worst_eta, np.linalg.norm(r**N * h.modal + one.modal + two.modal - eta) / np.linalg.norm(eta))
        zeta = second_variation_path(traj, h, k)[-1]
        z1, z2 = two_sided_second_components(traj, h, k)
        worst_zeta = max(worst_zeta, np.linalg.norm(z1.modal + z2.modal - zeta) / np.linalg.norm(zeta))
    ok = worst_eta <= 1e-10 and worst_zeta <= 1e-10
    criterion(5, "two-sided decomposition", ok, f"eta {worst_eta:.2e}, zeta {worst_zeta:.2e} (want <= 1e-10)")
    assert ok


def test_criterion_06_smoothing_bound(criterion):
    rng = np.random.default_rng(6)
    size = 10_000
    i = rng.integers(1, 513, size)
    n = rng.integers(1, 1001, size)
    dt = 10.0 ** rng.uniform(-5, 0, size)
    beta = rng.uniform(0, 1, size)
    lam = (i * np.pi) ** 2
    # t_n^beta lambda^beta <= (1 + dt lambda)^n, compared in log form
    lhs = beta * np.log(n * dt * lam)
    rhs = n * np.log1p(dt * lam)
    violations = int(np.count_nonzero(lhs > rhs))
    ok = violations == 0
    criterion(6, "smoothing bound", ok, f"{violations} violations in {size} tuples")
    assert ok


def test_criterion_07_hilbert_schmidt_bound(criterion):
    kappa, dt, M = 0.05, 0.01, 512
    C = hs_norm_frac_resolvent(0.0, 1, dt, M) * dt ** (0.25 + kappa)
    violations = [
        (beta, n)
        for beta in (0.0, 0.1, 0.2)
        for n in range(1, 257)
        if hs_norm_frac_resolvent(beta, n, dt, M) > C * (n * dt) ** (-0.25 - beta - kappa)
    ]
    ok = not violations
    criterion(7, "Hilbert-Schmidt bound", ok, f"{len(violations)} violations in 768 (beta, n) pairs, C = {C:.6g}")
    assert ok


@pytest.mark.slow
def test_criterion_08_duality(criterion):
    M, N, samples = 64, 64, 100_000
    g = build_grid(M)
    x0 = Field.basis(g, 1)
    lin = SchemeParams(T / N, N, M, cf.linear_additive())
    lhs_l, rhs_l, se_l = duality_check(lin, x0, samples, psi="first-mode")
    psi = np.zeros(M)
    psi[0] = 1.0
    exact = duality_closed_form(lin, x0, psi)
    nonlin = SchemeParams(T / N, N, M, cf.smooth_default())
    lhs_n, rhs_n, se_n = duality_check(nonlin, x0, samples, psi="state")
    ok_lin = abs(lhs_l - rhs_l) <= 4 * se_l and abs(lhs_l - exact) <= 4 * se_l and abs(rhs_l - exact) <= 4 * se_l
    ok_non = abs(lhs_n - rhs_n) <= 4 * se_n
    detail = (
        f"linear |lhs - rhs| {abs(lhs_l - rhs_l):.3g} vs 4 SE {4 * se_l:.3g} (closed form {exact:.6g}); "
        f"nonlinear |lhs - rhs| {abs(lhs_n - rhs_n):.3g} vs 4 SE {4 * se_n:.3g}"
    )
    criterion(8, "duality formula", ok_lin and ok_non, detail)
    assert ok_lin and ok_non


@pytest.mark.slow
def test_criterion_09_regularity_probe(criterion):
    M, samples = 64, 100_000
    times = [0.5 * 2.0**-j for j in range(5)]
    g = build_grid(M)
    p = SchemeParams(min(times) / 16, 1, M, cf.smooth_default())
    x0, h_raw = Field.basis(g, 1), probe_direction(M)
    rough = regularity_probe(p, x0, h_raw, 0.45, times, samples)
    smooth = regularity_probe(p, x0, h_raw, 0.0, times, samples)
    ok = 0.25 <= rough.exponent <= 0.65 and rough.exponent > smooth.exponent
    detail = (
        f"exponent {rough.exponent:.4f} at beta 0.45 (want [0.25, 0.65]), {smooth.exponent:.4f} at beta 0 "
        f"(want strictly smaller); reliable {rough.reliable and smooth.reliable}"
    )
    criterion(9, "regularity probe", ok, detail)
    assert ok


def _cli(args, threads, cwd):
    env = dict(os.environ, SPDE_THREADS=str(threads))
    subprocess.run([sys.executable, "-m", "spdeweak", *args], check=True, env=env, cwd=cwd, capture_output=True)


def test_criterion_10_determinism(tmp_path, criterion):
    runs = {
        "weak": ["weak-order", "--modes", "16", "--samples", "1000", "--levels", "1/16,1/32,1/64", "--ref-factor", "4"],
        "malliavin": ["malliavin-check", "--modes", "16", "--steps", "16", "--format", "json"],
        "duality": ["duality-check", "--modes", "16", "--steps", "16", "--samples", "1000", "--psi", "state"],
    }
    mismatched = []
    for name, args in runs.items():
        blobs = []
        for threads in (1, 4):
            d = tmp_path / f"{name}-{threads}"
            d.mkdir()
            _cli(args + ["--out", "out.dat"], threads, d)
            blobs.append({f.name: f.read_bytes() for f in sorted(d.iterdir())})
        if blobs[0] != blobs[1]:
            mismatched.append(name)
    ok = not mismatched
    criterion(10, "determinism", ok, f"{len(runs) - len(mismatched)}/{len(runs)} commands byte-identical across SPDE_THREADS=1,4")
    assert ok
    assert json.loads((tmp_path / "malliavin-1" / "out.dat").read_text())["pass"]
