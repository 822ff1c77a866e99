"""Monte Carlo estimators of ``u = E phi(X_N)`` and its derivatives, error curves and rate fits.

Every estimator is a sample-parallel map over chunks (see :mod:`montecarlo`)
followed by a compensated reduction, so results depend only on the seed and
the sample count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats

from . import montecarlo
from .coefficients import Linearization
from .errors import InvalidArgument
from .noise import IncrementStream
from .solver import SchemeParams, advance, check_finite, coupled_terminal_batch
from .spectral import Field, apply_frac_power
from .variations import second_step, tangent_step


@dataclass(frozen=True)
class ErrorLevel:
    dt: float
    error: float
    stderr: float
    samples: int

    def __post_init__(self):
        if self.stderr < 0 or self.samples < 2:
            raise InvalidArgument(f"invalid error level {self}")


@dataclass(frozen=True)
class RateEstimate:
    """OLS fit of ``ln error = intercept + slope * ln dt``.

    For regularity probes ``dt`` is the horizon ``T`` and :attr:`exponent`
    (``-slope``) is the empirical blow-up exponent.
    """

    slope: float
    intercept: float
    r_squared: float
    slope_stderr: float
    levels: tuple = field(default=())
    reliable: bool = True
    note: str = ""

    @property
    def exponent(self) -> float:
        return -self.slope


def fit_rate(levels) -> RateEstimate:
    levels = tuple(levels)
    if len(levels) < 3:
        raise InvalidArgument(f"need at least 3 levels for a rate fit, got {len(levels)}")
    if any(not lv.error > 0 for lv in levels):
        raise InvalidArgument("all errors must be positive for a log-log fit")
    x = np.log([lv.dt for lv in levels])
    y = np.log([lv.error for lv in levels])
    fit = stats.linregress(x, y)
    return RateEstimate(
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        r_squared=float(fit.rvalue**2),
        slope_stderr=float(fit.stderr),
        levels=levels,
    )


# -- per-sample kernels ------------------------------------------------------


def _propagate(params: SchemeParams, x0, seed, indices, h=None, k=None, record=None):
    """Evolve ``X`` and, when requested, ``eta^h``, ``eta^k``, ``zeta^{h,k}`` on common paths.

    ``record(n, x, eta_h)`` is called after every step ``n -> n + 1`` with the new states.
    """
    S = len(indices)
    shape = (S, params.modes)
    x = np.broadcast_to(np.asarray(x0, dtype=float), shape).copy()
    eh = None if h is None else np.broadcast_to(np.asarray(h, dtype=float), shape).copy()
    ek = None if k is None else np.broadcast_to(np.asarray(k, dtype=float), shape).copy()
    zeta = np.zeros(shape) if k is not None else None
    src = IncrementStream(seed, indices, params.modes, params.dt)
    done = 0
    while done < params.steps:
        b = min(128, params.steps - done)
        block = src.next_block(b)
        for j in range(b):
            dw = block[:, j, :]
            x_next, lin = advance(params, x, dw)
            if zeta is not None:
                zeta = second_step(params, lin, dw, zeta, eh, ek)
                ek = tangent_step(params, lin, dw, ek)
            if eh is not None:
                eh = tangent_step(params, lin, dw, eh)
            x = x_next
            check_finite(x, done + j)
            if record is not None:
                record(done + j + 1, x, eh)
        done += b
    return x, eh, ek, zeta


def _final(params, x):
    return Linearization(params.grid, params.bundle, x, params.reg)


def _check_samples(samples):
    if samples < 2:
        raise InvalidArgument(f"need at least 2 samples, got {samples}")


def estimate_u(params: SchemeParams, x0: Field, samples: int, seed: int = 1):
    """Mean and standard error of ``phi_delta(X_N)``."""
    _check_samples(samples)

    def chunk(idx):
        x, *_ = _propagate(params, x0.modal, seed, idx)
        return _final(params, x).phi()

    return montecarlo.mean_stderr(montecarlo.map_samples(chunk, samples))


def estimate_Du(params: SchemeParams, x0: Field, h: Field, samples: int, seed: int = 1):
    """Mean and standard error of ``Dphi_delta(X_N).eta_N^h``."""
    _check_samples(samples)

    def chunk(idx):
        x, eh, _, _ = _propagate(params, x0.modal, seed, idx, h=h.modal)
        return _final(params, x).phi_d1(eh)

    return montecarlo.mean_stderr(montecarlo.map_samples(chunk, samples))


def d2u_samples(params: SchemeParams, x0: Field, h: Field, k: Field, seed: int, indices):
    x, eh, ek, zeta = _propagate(params, x0.modal, seed, indices, h=h.modal, k=k.modal)
    lin = _final(params, x)
    return lin.phi_d2(eh, ek) + lin.phi_d1(zeta)


def estimate_D2u(params: SchemeParams, x0: Field, h: Field, k: Field, samples: int, seed: int = 1):
    """Mean and standard error of ``D^2phi(X_N).(eta^h, eta^k) + Dphi(X_N).zeta^{h,k}``."""
    _check_samples(samples)
    values = montecarlo.map_samples(lambda idx: d2u_samples(params, x0, h, k, seed, idx), samples)
    return montecarlo.mean_stderr(values)


# -- level sweeps ------------------------------------------------------------


def level_factors(levels, reference_dt):
    """Integer coarsening factors ``dt_level / reference_dt``; raises unless every ratio is a power of 2."""
    out = []
    for dt in levels:
        ratio = Fraction(dt).limit_denominator(1 << 40) / Fraction(reference_dt).limit_denominator(1 << 40)
        if ratio.denominator != 1 or ratio.numerator < 1 or ratio.numerator & (ratio.numerator - 1):
            raise InvalidArgument(f"level {dt} is not a power-of-2 multiple of the reference step {reference_dt}")
        out.append(int(ratio.numerator))
    return out


@dataclass(frozen=True, eq=False)
class SweepSamples:
    """Per-sample terminal quantities of a coupled sweep: ``phi`` at each level and at the reference,
    and the squared L2 distance of each level's terminal state to the reference one."""

    factors: tuple
    phi: dict
    phi_ref: np.ndarray
    sq_dist: dict


def coupled_sweep(params_ref: SchemeParams, x0: Field, factors, samples: int, seed: int = 1) -> SweepSamples:
    """Run the reference level and every coarsened level on the same Wiener paths."""
    _check_samples(samples)
    factors = tuple(int(r) for r in factors)
    keys = sorted(set(factors))

    def chunk(idx):
        states = coupled_terminal_batch(params_ref, x0.modal, keys, seed, idx)
        ref = states[1]
        out = [_final(params_ref, ref).phi()]
        for r in keys:
            out.append(_final(params_ref, states[r]).phi())
            out.append(np.sum((states[r] - ref) ** 2, axis=-1))
        return tuple(out)

    parts = montecarlo.map_samples(chunk, samples)
    phi = {r: parts[1 + 2 * j] for j, r in enumerate(keys)}
    sq = {r: parts[2 + 2 * j] for j, r in enumerate(keys)}
    return SweepSamples(factors, phi, parts[0], sq)


def _sweep_params(params_base: SchemeParams, levels, reference_dt):
    horizon = params_base.horizon
    levels = [float(dt) for dt in levels]
    if not levels:
        raise InvalidArgument("need at least one level")
    ref = min(levels) if reference_dt is None else float(reference_dt)
    steps = horizon / ref
    if abs(steps - round(steps)) > 1e-9 * steps:
        raise InvalidArgument(f"reference step {ref} does not divide the horizon {horizon}")
    params_ref = SchemeParams(ref, int(round(steps)), params_base.modes, params_base.bundle, params_base.reg)
    return params_ref, level_factors(levels, ref)


def weak_levels_from_sweep(sweep: SweepSamples, levels):
    out = []
    for dt, r in zip(levels, sweep.factors):
        mean, se = montecarlo.mean_stderr(sweep.phi[r] - sweep.phi_ref)
        out.append(ErrorLevel(float(dt), abs(mean), se, len(sweep.phi_ref)))
    return out


def strong_levels_from_sweep(sweep: SweepSamples, levels):
    out = []
    for dt, r in zip(levels, sweep.factors):
        msq, se_msq = montecarlo.mean_stderr(sweep.sq_dist[r])
        err = math.sqrt(msq)
        se = se_msq / (2.0 * err) if err > 0 else 0.0
        out.append(ErrorLevel(float(dt), err, se, len(sweep.phi_ref)))
    return out


def weak_error_curve(
    params_base: SchemeParams,
    x0: Field,
    levels,
    samples: int,
    reference: str = "finest",
    reference_dt=None,
    seed: int = 1,
):
    """``|E phi(X^dt_N) - reference|`` for each level step ``dt`` over the horizon of ``params_base``.

    ``reference="finest"`` compares against the scheme at ``reference_dt``
    (default: the smallest level) on coupled paths, with the standard error of
    the per-sample differences.  ``reference="closed_form"`` compares against
    the exact Galerkin solution, available for linear additive bundles with
    ``phi(u) = u^2``.
    """
    if reference == "closed_form":
        target = closed_form_u_continuum(params_base, x0)
        params_ref, factors = _sweep_params(params_base, levels, reference_dt)
        sweep = coupled_sweep(params_ref, x0, factors, samples, seed)
        out = []
        for dt, r in zip(levels, factors):
            mean, se = montecarlo.mean_stderr(sweep.phi[r])
            out.append(ErrorLevel(float(dt), abs(mean - target), se, samples))
        return out
    if reference != "finest":
        raise InvalidArgument(f"reference must be 'finest' or 'closed_form', got {reference!r}")
    params_ref, factors = _sweep_params(params_base, levels, reference_dt)
    sweep = coupled_sweep(params_ref, x0, factors, samples, seed)
    return weak_levels_from_sweep(sweep, levels)


def strong_error_curve(params_base: SchemeParams, x0: Field, levels, samples: int, reference_dt=None, seed: int = 1):
    """``(E |X^dt_N - X^ref_N|^2)^{1/2}`` per level on coupled paths; stderr by the delta method."""
    params_ref, factors = _sweep_params(params_base, levels, reference_dt)
    sweep = coupled_sweep(params_ref, x0, factors, samples, seed)
    return strong_levels_from_sweep(sweep, levels)


# -- closed forms for the linear additive case -------------------------------


def _require_linear_quadratic(params: SchemeParams):
    b = params.bundle
    if not b.is_linear_additive or b.phi.kind != "quadratic":
        raise InvalidArgument(f"closed forms need a linear additive bundle with phi(u) = u^2, got {b.name!r}")
    if params.reg.delta or params.reg.tau:
        raise InvalidArgument("closed forms assume delta = tau = 0")
    return b.sigma_constant


def closed_form_u(params: SchemeParams, x0: Field) -> float:
    """``E |X_N|^2 = sum_i a_i^2 r_i^{2N} + c^2 dt r_i^2 (1 - r_i^{2N}) / (1 - r_i^2)``."""
    c = _require_linear_quadratic(params)
    r = params.grid.resolvent_factors(params.dt)
    r2N = r ** (2 * params.steps)
    var = c**2 * params.dt * r**2 * (1.0 - r2N) / (1.0 - r**2)
    return float(np.sum(x0.modal**2 * r2N + var))


def closed_form_u_continuum(params: SchemeParams, x0: Field) -> float:
    """Exact ``E |X(T)|^2`` of the Galerkin system: ``sum_i a_i^2 e^{-2 lambda_i T} + c^2 (1 - e^{-2 lambda_i T}) / (2 lambda_i)``."""
    c = _require_linear_quadratic(params)
    lam = params.grid.eigenvalues
    decay = np.exp(-2.0 * lam * params.horizon)
    return float(np.sum(x0.modal**2 * decay + c**2 * (-np.expm1(-2.0 * lam * params.horizon)) / (2.0 * lam)))


def closed_form_strong_error(params_ref: SchemeParams, x0: Field, factor: int) -> float:
    """``(E |X^{r dt}_{N/r} - X^{dt}_N|^2)^{1/2}`` for the linear additive case on coupled paths.

    Fine increment ``j`` enters the coarse state with weight ``r_c^{N_c - floor(j / r)}``
    and the fine state with ``r_f^{N_f - j}``.
    """
    c = _require_linear_quadratic(params_ref)
    grid = params_ref.grid
    Nf = params_ref.steps
    if Nf % factor:
        raise InvalidArgument(f"factor {factor} must divide {Nf}")
    Nc = Nf // factor
    rf = grid.resolvent_factors(params_ref.dt)
    rc = grid.resolvent_factors(params_ref.dt * factor)
    j = np.arange(Nf)[:, None]
    weights = rc[None, :] ** (Nc - j // factor) - rf[None, :] ** (Nf - j)
    var = c**2 * params_ref.dt * np.sum(weights**2)
    mean_diff = x0.modal * (rc**Nc - rf**Nf)
    return float(math.sqrt(var + np.sum(mean_diff**2)))


def closed_form_Du(params: SchemeParams, x0: Field, h: Field) -> float:
    """``2 <S^N x, S^N h>`` (linear additive, ``phi(u) = u^2``)."""
    _require_linear_quadratic(params)
    rN = params.grid.resolvent_factors(params.dt) ** params.steps
    return float(2.0 * np.sum(rN * x0.modal * rN * h.modal))


# -- regularity probe --------------------------------------------------------


def regularity_probe(
    params: SchemeParams,
    x0: Field,
    h_raw: Field,
    beta: float,
    T_grid,
    samples: int,
    seed: int = 1,
) -> RateEstimate:
    """Fit ``ln |Du(T, x0).h|`` against ``ln T`` with ``h = (-A)^beta h_raw``.

    One set of paths runs to ``max(T_grid)`` with step ``params.dt`` and the
    estimator is read off at each grid time.  The result is marked unreliable
    (never raised) when a level's standard error exceeds half its magnitude.
    """
    if not 0 <= beta < 1:
        raise InvalidArgument(f"beta must lie in [0, 1), got {beta}")
    times = [float(t) for t in T_grid]
    if len(times) < 3 or any(a <= b for a, b in zip(times, times[1:])) or times[-1] <= 0:
        raise InvalidArgument("T_grid must hold at least 3 positive, strictly decreasing times")
    steps = []
    for t in times:
        n = t / params.dt
        if abs(n - round(n)) > 1e-9 * n or round(n) < 1:
            raise InvalidArgument(f"time {t} is not a positive multiple of dt = {params.dt}")
        steps.append(int(round(n)))
    _check_samples(samples)
    h = apply_frac_power(beta, h_raw)
    run = params.with_steps(max(steps))
    wanted = set(steps)

    def chunk(idx):
        out = {}

        def record(n, x, eh):
            if n in wanted:
                out[n] = _final(run, x).phi_d1(eh)

        _propagate(run, x0.modal, seed, idx, h=h.modal, record=record)
        return tuple(out[n] for n in steps)

    parts = montecarlo.map_samples(chunk, samples)
    levels, reliable, notes = [], True, []
    for t, vals in zip(times, parts):
        mean, se = montecarlo.mean_stderr(vals)
        if se > 0.5 * abs(mean):
            reliable = False
            notes.append(f"T={t:g}: stderr {se:.3g} exceeds half of |Du| = {abs(mean):.3g}")
        levels.append(ErrorLevel(t, abs(mean), se, samples))
    if any(lv.error == 0 for lv in levels):
        return RateEstimate(math.nan, math.nan, math.nan, math.nan, tuple(levels), False, "zero derivative estimate")
    fit = fit_rate(levels)
    return RateEstimate(
        fit.slope, fit.intercept, fit.r_squared, fit.slope_stderr, fit.levels, reliable, "; ".join(notes)
    )
