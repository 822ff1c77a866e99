"""Semi-implicit (linear-implicit) Euler scheme.

One step reads::

    X_{n+1} = S_dt ( X_n + dt G_delta(X_n) + e^{tau A} sigma_delta(X_n) dW_n ),
    S_dt = (I - dt A)^{-1},

with nonlinearities evaluated on the nodes and the linear operators applied
diagonally on the modal coefficients.  ``delta = tau = 0`` is the plain
scheme.  The array kernels work on a leading batch axis; the Field-level
functions below are thin wrappers for a single path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import montecarlo
from .coefficients import NO_REGULARIZATION, CoefficientBundle, Linearization, RegularizationParams
from .errors import InvalidArgument, InvalidState, NumericalFailure
from .noise import IncrementStream, NoisePath, coarsen
from .spectral import Field, SpectralGrid, build_grid


@dataclass(frozen=True)
class SchemeParams:
    dt: float
    steps: int
    modes: int
    bundle: CoefficientBundle
    reg: RegularizationParams = NO_REGULARIZATION

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidArgument(f"time step must be positive, got {self.dt}")
        if self.steps < 0 or int(self.steps) != self.steps:
            raise InvalidArgument(f"step count must be a nonnegative integer, got {self.steps}")
        if self.modes < 1:
            raise InvalidArgument(f"mode count must be positive, got {self.modes}")

    @property
    def horizon(self) -> float:
        return self.steps * self.dt

    @property
    def grid(self) -> SpectralGrid:
        return build_grid(self.modes)

    def refined(self, r: int) -> "SchemeParams":
        """Same horizon with ``r`` times more steps."""
        return SchemeParams(self.dt / r, self.steps * r, self.modes, self.bundle, self.reg)

    def coarsened(self, r: int) -> "SchemeParams":
        if self.steps % r:
            raise InvalidArgument(f"coarsening factor {r} must divide the step count {self.steps}")
        return SchemeParams(self.dt * r, self.steps // r, self.modes, self.bundle, self.reg)

    def with_steps(self, steps: int) -> "SchemeParams":
        return SchemeParams(self.dt, steps, self.modes, self.bundle, self.reg)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States ``X_0..X_N`` as an ``(N + 1, M)`` modal array, plus the driving noise when retained."""

    states: np.ndarray
    params: SchemeParams
    noise: NoisePath | None = field(default=None)

    @property
    def grid(self):
        return self.params.grid

    def state(self, n: int) -> Field:
        return Field(self.grid, modal=self.states[n])

    @property
    def terminal(self) -> Field:
        return self.state(len(self.states) - 1)

    def require_noise(self) -> NoisePath:
        if self.noise is None:
            raise InvalidState("this workflow needs a trajectory simulated with retain_noise=True")
        return self.noise


# -- array kernels -----------------------------------------------------------


def advance(params: SchemeParams, x, dw, lin: Linearization | None = None):
    """One scheme step on a batch of modal states; returns ``(X_{n+1}, linearization at X_n)``."""
    grid = params.grid
    if lin is None:
        lin = Linearization(grid, params.bundle, x, params.reg)
    x_next = (x + lin.increment(params.dt, dw)) * grid.resolvent_factors(params.dt)
    return x_next, lin


def check_finite(x, step: int):
    ok = np.isfinite(x)
    if not ok.all():
        bad = int(np.count_nonzero(~ok.reshape(-1, x.shape[-1]).all(axis=-1)))
        raise NumericalFailure(f"non-finite state after step {step} in {bad} sample(s)", step=step, failed=bad)


def increment_blocks(seed, indices, params: SchemeParams, block: int):
    """Yield per-step ``(samples, M)`` increments, drawn ``block`` steps at a time."""
    src = IncrementStream(seed, indices, params.modes, params.dt)
    done = 0
    while done < params.steps:
        b = min(block, params.steps - done)
        chunk = src.next_block(b)
        for j in range(b):
            yield chunk[:, j, :]
        done += b


def terminal_batch(params: SchemeParams, x0, seed: int, indices, block: int = 128):
    """Terminal modal states for the given sample indices."""
    x = np.broadcast_to(np.asarray(x0, dtype=float), (len(indices), params.modes)).copy()
    for n, dw in enumerate(increment_blocks(seed, indices, params, block)):
        x, _ = advance(params, x, dw)
        check_finite(x, n)
    return x


def coupled_terminal_batch(params_fine: SchemeParams, x0, factors, seed: int, indices):
    """Terminal states on the fine level and on each coarsened level, driven by one Wiener path.

    Returns a dict ``factor -> (samples, M)``; factor 1 is the fine level.
    """
    factors = sorted(set(int(r) for r in factors) | {1})
    block = max(factors)
    for r in factors:
        if block % r or params_fine.steps % r:
            raise InvalidArgument(f"factor {r} must divide {block} and the fine step count {params_fine.steps}")
    S, M = len(indices), params_fine.modes
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (S, M))
    states = {r: x0.copy() for r in factors}
    levels = {r: params_fine.coarsened(r) for r in factors}
    src = IncrementStream(seed, indices, M, params_fine.dt)
    done = 0
    while done < params_fine.steps:
        fine = src.next_block(block)
        for r in factors:
            inc = fine if r == 1 else fine.reshape(S, block // r, r, M).sum(axis=2)
            x = states[r]
            for j in range(block // r):
                x, _ = advance(levels[r], x, inc[:, j, :])
            check_finite(x, (done + block) // r - 1)
            states[r] = x
        done += block
    return states


# -- Field-level API ---------------------------------------------------------


def step(x: Field, dw, params: SchemeParams) -> Field:
    """One step from ``x`` with modal increments ``dw`` (a Field or an array of length M)."""
    dw = dw.modal if isinstance(dw, Field) else np.asarray(dw, dtype=float)
    x_next, _ = advance(params, x.modal, dw)
    check_finite(x_next, 0)
    return Field(x.grid, modal=x_next)


def _check_path(path: NoisePath, params: SchemeParams):
    if path.modes != params.modes or path.steps != params.steps:
        raise InvalidArgument(
            f"noise path is {path.steps}x{path.modes}, scheme expects {params.steps}x{params.modes}"
        )
    if not np.isclose(path.dt, params.dt, rtol=1e-12, atol=0):
        raise InvalidArgument(f"noise path step {path.dt} differs from scheme step {params.dt}")


def simulate(x0: Field, path: NoisePath, params: SchemeParams, *, retain_noise=True, check_mild=False) -> Trajectory:
    _check_path(path, params)
    states = np.empty((params.steps + 1, params.modes))
    states[0] = x0.modal
    x = states[0]
    for n in range(params.steps):
        x, _ = advance(params, x, path.increments[n])
        check_finite(x, n)
        states[n + 1] = x
    traj = Trajectory(states, params, path if retain_noise else None)
    if check_mild:
        mild = mild_form_states(x0, states, path, params)
        scale = np.maximum(np.abs(states).max(), 1e-300)
        err = np.abs(mild - states).max() / scale
        if err > 1e-9:
            raise InvalidState(f"mild form disagrees with the iterated scheme (relative error {err:.3e})")
    return traj


def mild_form_states(x0: Field, states, path: NoisePath, params: SchemeParams):
    """Evaluate ``X_k = S^k x + dt sum S^{k-l} G(X_l) + sum S^{k-l} e^{tau A} sigma(X_l) dW_l`` directly."""
    grid = params.grid
    r = grid.resolvent_factors(params.dt)
    lin = Linearization(grid, params.bundle, states[:-1], params.reg)
    terms = lin.increment(params.dt, path.increments)  # row l: dt G(X_l) + e^{tau A} sigma(X_l) dW_l
    out = np.empty_like(states)
    out[0] = x0.modal
    N = params.steps
    for k in range(1, N + 1):
        powers = r[None, :] ** np.arange(k, 0, -1)[:, None]  # S^{k-l}, l = 0..k-1
        out[k] = r**k * x0.modal + np.sum(powers * terms[:k], axis=0)
    return out


def simulate_coupled(x0: Field, fine_path: NoisePath, r: int, params_fine: SchemeParams):
    """Terminal states of the fine scheme and of the ``r``-times coarser one on the same Wiener path."""
    coarse_path = coarsen(fine_path, r)
    fine = simulate(x0, fine_path, params_fine, retain_noise=False).terminal
    if r == 1:
        return fine, fine
    coarse = simulate(x0, coarse_path, params_fine.coarsened(r), retain_noise=False).terminal
    return fine, coarse


def moment_probe(params: SchemeParams, x0: Field, samples: int, alpha: float, seed: int = 1):
    """Monte Carlo mean and standard error of ``|(-A)^alpha X_N|^2``."""
    if not 0 <= alpha < 0.25:
        raise InvalidArgument(f"alpha must lie in [0, 1/4), got {alpha}")
    weights = params.grid.eigenvalues ** (2 * alpha)

    def chunk(idx):
        x = terminal_batch(params, x0.modal, seed, idx)
        return np.sum(weights * x**2, axis=-1)

    return montecarlo.mean_stderr(montecarlo.map_samples(chunk, samples))
