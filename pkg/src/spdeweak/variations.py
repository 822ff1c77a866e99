"""First and second variations of the scheme, random operator products and Malliavin derivatives.

For a step at state ``X_n`` with increment ``dW_n`` the linear operator ::

    Pi_n z = S_dt ( z + dt G'_delta(X_n).z + e^{tau A}(sigma'_delta(X_n).z) dW_n )

drives everything here: ``eta_{n+1} = Pi_n eta_n``, the second variation adds
the ``G''`` and ``sigma''`` source terms, and the derivative of ``X_n`` with
respect to ``dW_l`` is ``Pi_{n-1:l+1} S_dt e^{tau A} sigma_delta(X_l)``.
Products of ``Pi`` are only ever applied to vectors, never formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import montecarlo
from .coefficients import Linearization
from .errors import InvalidArgument
from .noise import IncrementStream
from .solver import SchemeParams, Trajectory, advance, check_finite
from .spectral import Field, _check_same_grid

# -- array kernels -----------------------------------------------------------


def tangent_step(params: SchemeParams, lin: Linearization, dw, z):
    """``Pi(X_n, dW_n) z`` for modal ``z`` (batched like ``lin``)."""
    r = params.grid.resolvent_factors(params.dt)
    return (z + lin.tangent_increment(params.dt, dw, z)) * r


def second_step(params: SchemeParams, lin: Linearization, dw, zeta, eta_h, eta_k):
    r = params.grid.resolvent_factors(params.dt)
    inc = lin.tangent_increment(params.dt, dw, zeta) + lin.second_increment(params.dt, dw, eta_h, eta_k)
    return (zeta + inc) * r


def noise_response(params: SchemeParams, lin: Linearization, theta):
    """``S_dt e^{tau A} sigma_delta(X_l) theta``: the response of ``X_{l+1}`` to ``dW_l``."""
    return lin.diffusion(theta, noise_smoothing=True) * params.grid.resolvent_factors(params.dt)


# -- single-path API ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TangentState:
    eta: Field
    n: int
    h: Field


@dataclass(frozen=True, eq=False)
class SecondVariationState:
    zeta: Field
    n: int
    h: Field
    k: Field


def _lin(params, x: Field):
    return Linearization(params.grid, params.bundle, x.modal, params.reg)


def _modal(dw):
    return dw.modal if isinstance(dw, Field) else np.asarray(dw, dtype=float)


def pi_apply(x: Field, dw, z: Field, params: SchemeParams) -> Field:
    """``Pi_n z`` with ``Pi_n`` frozen at state ``x`` and increment ``dw``."""
    _check_same_grid(x, z)
    return Field(x.grid, modal=tangent_step(params, _lin(params, x), _modal(dw), z.modal))


def step_eta(eta: Field, x: Field, dw, params: SchemeParams) -> Field:
    return pi_apply(x, dw, eta, params)


def step_zeta(zeta: Field, eta_h: Field, eta_k: Field, x: Field, dw, params: SchemeParams) -> Field:
    _check_same_grid(x, zeta, eta_h, eta_k)
    out = second_step(params, _lin(params, x), _modal(dw), zeta.modal, eta_h.modal, eta_k.modal)
    return Field(x.grid, modal=out)


def _linearizations(traj: Trajectory):
    """One Linearization per step ``0..N-1``."""
    p = traj.params
    return [Linearization(p.grid, p.bundle, traj.states[n], p.reg) for n in range(p.steps)]


def tangent_path(traj: Trajectory, h: Field):
    """``eta_0..eta_N`` in direction ``h`` as an ``(N + 1, M)`` modal array."""
    p = traj.params
    dW = traj.require_noise().increments
    out = np.empty_like(traj.states)
    out[0] = h.modal
    for n, lin in enumerate(_linearizations(traj)):
        out[n + 1] = tangent_step(p, lin, dW[n], out[n])
    return out


def second_variation_path(traj: Trajectory, h: Field, k: Field, eta_h=None, eta_k=None):
    """``zeta_0..zeta_N`` in directions ``(h, k)``."""
    p = traj.params
    dW = traj.require_noise().increments
    eta_h = tangent_path(traj, h) if eta_h is None else eta_h
    eta_k = tangent_path(traj, k) if eta_k is None else eta_k
    out = np.zeros_like(traj.states)
    for n, lin in enumerate(_linearizations(traj)):
        out[n + 1] = second_step(p, lin, dW[n], out[n], eta_h[n], eta_k[n])
    return out


def pi_product(traj: Trajectory, last: int, first: int, z):
    """``Pi_{last:first} z = Pi_last ... Pi_first z``; the identity when ``first = last + 1``."""
    p = traj.params
    if not (0 <= first <= last + 1 <= p.steps):
        raise InvalidArgument(f"invalid product range {last}:{first} for {p.steps} steps")
    dW = traj.require_noise().increments
    z = np.asarray(z, dtype=float)
    for j in range(first, last + 1):
        lin = Linearization(p.grid, p.bundle, traj.states[j], p.reg)
        z = tangent_step(p, lin, dW[j], z)
    return z


def _propagate_terms(traj: Trajectory, terms, n: int):
    """``sum_l Pi_{n-1:l+1} terms[l]`` over ``l < n``, each term carried forward separately."""
    p = traj.params
    dW = traj.require_noise().increments
    carried = np.array(terms[:n], dtype=float)
    for j in range(1, n):
        lin = Linearization(p.grid, p.bundle, traj.states[j], p.reg)
        carried[:j] = tangent_step(p, lin, dW[j], carried[:j])
    return carried.sum(axis=0)


def two_sided_components(traj: Trajectory, h: Field, n: int | None = None):
    """``(eta~^{h,1}_n, eta~^{h,2}_n)``: drift and noise parts of ``eta_n - S^n h`` as direct sums."""
    p = traj.params
    n = p.steps if n is None else n
    dW = traj.require_noise().increments
    r = p.grid.resolvent_factors(p.dt)
    drift_terms = np.zeros((n, p.modes))
    noise_terms = np.zeros((n, p.modes))
    sh = np.array(h.modal, dtype=float)
    for ell in range(n):
        lin = Linearization(p.grid, p.bundle, traj.states[ell], p.reg)
        drift_terms[ell] = p.dt * lin.drift_d1(sh) * r
        noise_terms[ell] = lin.diffusion(dW[ell], sh, noise_smoothing=True) * r
        sh = sh * r
    return (
        Field(p.grid, modal=_propagate_terms(traj, drift_terms, n)),
        Field(p.grid, modal=_propagate_terms(traj, noise_terms, n)),
    )


def two_sided_second_components(traj: Trajectory, h: Field, k: Field, n: int | None = None):
    """``(zeta^{h,k,1}_n, zeta^{h,k,2}_n)`` as direct sums; they add up to ``zeta_n``."""
    p = traj.params
    n = p.steps if n is None else n
    dW = traj.require_noise().increments
    r = p.grid.resolvent_factors(p.dt)
    eta_h, eta_k = tangent_path(traj, h), tangent_path(traj, k)
    drift_terms = np.zeros((n, p.modes))
    noise_terms = np.zeros((n, p.modes))
    for ell in range(n):
        lin = Linearization(p.grid, p.bundle, traj.states[ell], p.reg)
        drift_terms[ell] = p.dt * lin.drift_d2(eta_h[ell], eta_k[ell]) * r
        noise_terms[ell] = lin.diffusion(dW[ell], eta_h[ell], eta_k[ell], noise_smoothing=True) * r
    return (
        Field(p.grid, modal=_propagate_terms(traj, drift_terms, n)),
        Field(p.grid, modal=_propagate_terms(traj, noise_terms, n)),
    )


def malliavin_derivative(traj: Trajectory, ell: int, theta: Field, n: int | None = None) -> Field:
    """Derivative of ``X_n`` with respect to the increment ``dW_ell`` in direction ``theta``.

    Zero when ``ell >= n`` (``X_n`` does not see later increments).
    """
    p = traj.params
    n = p.steps if n is None else n
    if not (0 <= ell < p.steps and 0 <= n <= p.steps):
        raise InvalidArgument(f"need 0 <= ell < {p.steps} and 0 <= n <= {p.steps}, got ell={ell}, n={n}")
    traj.require_noise()
    if ell >= n:
        return Field.zeros(p.grid)
    lin = Linearization(p.grid, p.bundle, traj.states[ell], p.reg)
    z = noise_response(p, lin, theta.modal)
    return Field(p.grid, modal=pi_product(traj, n - 1, ell + 1, z))


# -- duality ----------------------------------------------------------------


def _psi_zero(n, x):
    return np.zeros_like(x)


def _psi_first_mode(n, x):
    out = np.zeros_like(x)
    out[..., 0] = 1.0
    return out


def _psi_state(n, x):
    return x


PSI_CHOICES = {"zero": _psi_zero, "first-mode": _psi_first_mode, "state": _psi_state}


def duality_samples(params: SchemeParams, x0: Field, psi, seed: int, indices):
    """Per-sample ``(phi(X_N) sum_n <psi_n, dW_n>, dt Dphi(X_N).Y_N)`` for one chunk.

    ``Y_{n+1} = Pi_n Y_n + S_dt e^{tau A} sigma_delta(X_n) psi_n`` accumulates
    ``sum_n D_n X_N psi_n`` in one forward pass.
    """
    S = len(indices)
    x = np.broadcast_to(x0.modal, (S, params.modes)).copy()
    y = np.zeros_like(x)
    pairing = np.zeros(S)
    src = IncrementStream(seed, indices, params.modes, params.dt)
    done = 0
    while done < params.steps:
        b = min(128, params.steps - done)
        block = src.next_block(b)
        for j in range(b):
            n = done + j
            dw = block[:, j, :]
            psi_n = np.broadcast_to(np.asarray(psi(n, x), dtype=float), x.shape)
            pairing += np.sum(psi_n * dw, axis=-1)
            x_next, lin = advance(params, x, dw)
            y = tangent_step(params, lin, dw, y) + noise_response(params, lin, psi_n)
            x = x_next
            check_finite(x, n)
        done += b
    final = Linearization(params.grid, params.bundle, x, params.reg)
    lhs = final.phi() * pairing
    rhs = params.dt * final.phi_d1(y)
    return lhs, rhs


def duality_check(params: SchemeParams, x0: Field, samples: int, psi="first-mode", seed: int = 1):
    """Monte Carlo check of ``E[phi(X_N) sum <psi_n, dW_n>] = dt E[sum <D_n phi(X_N), psi_n>]``.

    ``psi(n, X_n)`` must depend on the path only through ``X_n`` (or earlier);
    a name from ``PSI_CHOICES`` selects a built-in.  Returns
    ``(lhs, rhs, stderr)``, the standard error being that of the per-sample
    difference.
    """
    if isinstance(psi, str):
        if psi not in PSI_CHOICES:
            raise InvalidArgument(f"unknown psi {psi!r}; choose from {sorted(PSI_CHOICES)}")
        psi = PSI_CHOICES[psi]
    lhs, rhs = montecarlo.map_samples(lambda idx: duality_samples(params, x0, psi, seed, idx), samples)
    lhs_mean, _ = montecarlo.mean_stderr(lhs)
    rhs_mean, _ = montecarlo.mean_stderr(rhs)
    _, se = montecarlo.mean_stderr(lhs - rhs)
    return lhs_mean, rhs_mean, se


def duality_closed_form(params: SchemeParams, x0: Field, psi_modal) -> float:
    """Both sides for the linear additive case with deterministic ``psi`` and ``phi = int u^2``.

    ``2 c dt sum_i m_i sum_n r_i^{N-n} psi_{n,i}`` with ``m = S^N x0``.
    """
    if not params.bundle.is_linear_additive or params.bundle.phi.kind != "quadratic":
        raise InvalidArgument("closed form needs a linear additive bundle with phi(u) = u^2")
    if params.reg.delta or params.reg.tau:
        raise InvalidArgument("closed form assumes delta = tau = 0")
    c = params.bundle.sigma_constant
    r = params.grid.resolvent_factors(params.dt)
    N = params.steps
    psi = np.broadcast_to(np.asarray(psi_modal, dtype=float), (N, params.modes))
    m = x0.modal * r**N
    powers = r[None, :] ** np.arange(N, 0, -1)[:, None]
    return float(2.0 * c * params.dt * np.sum(m * np.sum(powers * psi, axis=0)))
