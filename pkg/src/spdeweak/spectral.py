"""Sine-basis calculus on [0, 1] with homogeneous Dirichlet conditions.

The Laplacian ``A`` is diagonal in the basis ``e_i = sqrt(2) sin(i pi xi)`` with
``A e_i = -lambda_i e_i`` and ``lambda_i = (i pi)^2``.  Every operator built from
``A`` (semigroup, resolvent powers, fractional powers) is a multiplication of
the modal coefficients, so everything here works on the last axis of an array
and broadcasts over leading (sample) axes.

Nodal values live on the interior collocation points ``xi_k = k / (M + 1)``,
``k = 1..M``; the pair nodal <-> modal is a scaled DST-I and is exact for the
retained modes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.fft

from .errors import InvalidArgument

# Above this mode count the transforms go through scipy.fft instead of dense
# matrix products.
MATRIX_TRANSFORM_MAX_MODES = 256


@dataclass(frozen=True, eq=False)
class SpectralGrid:
    modes: int

    def __post_init__(self):
        if int(self.modes) != self.modes or self.modes < 1:
            raise InvalidArgument(f"mode count must be a positive integer, got {self.modes!r}")

    def __eq__(self, other):
        return isinstance(other, SpectralGrid) and other.modes == self.modes

    def __hash__(self):
        return hash(("SpectralGrid", self.modes))

    @property
    def spacing(self) -> float:
        return 1.0 / (self.modes + 1)

    @cached_property
    def indices(self) -> np.ndarray:
        return np.arange(1, self.modes + 1, dtype=float)

    @cached_property
    def nodes(self) -> np.ndarray:
        return self.indices / (self.modes + 1)

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        return (np.pi * self.indices) ** 2

    @cached_property
    def _sine_matrix(self) -> np.ndarray:
        # E[k, i] = e_i(xi_k); E.T @ E = (M + 1) I
        k = self.indices[:, None]
        i = self.indices[None, :]
        return np.sqrt(2.0) * np.sin(np.pi * k * i / (self.modes + 1))

    @cached_property
    def _analysis_matrix(self) -> np.ndarray:
        return self._sine_matrix / (self.modes + 1)

    @cached_property
    def _pairing_matrix(self) -> np.ndarray:
        # interior nodes -> sine coefficients of the derivative
        k = self.indices[:, None]
        i = self.indices[None, :]
        cos = np.cos(np.pi * k * i / (self.modes + 1))
        return cos * self._pairing_scale[None, :]

    @cached_property
    def _pairing_scale(self) -> np.ndarray:
        return -np.sqrt(2.0) * np.pi * self.indices * self.spacing

    @cached_property
    def _alternating(self) -> np.ndarray:
        return (-1.0) ** self.indices

    @property
    def _dense(self) -> bool:
        return self.modes <= MATRIX_TRANSFORM_MAX_MODES

    # -- transforms on raw arrays (last axis = modes) --------------------

    def nodal_from_modal(self, modal: np.ndarray) -> np.ndarray:
        modal = np.asarray(modal, dtype=float)
        if self._dense:
            return modal @ self._sine_matrix.T
        return scipy.fft.dst(modal, type=1, axis=-1) * (np.sqrt(2.0) / 2.0)

    def modal_from_nodal(self, nodal: np.ndarray) -> np.ndarray:
        nodal = np.asarray(nodal, dtype=float)
        if self._dense:
            return nodal @ self._analysis_matrix
        return scipy.fft.dst(nodal, type=1, axis=-1) * (np.sqrt(2.0) / (2.0 * (self.modes + 1)))

    def derivative_pairing(self, interior, left=0.0, right=0.0) -> np.ndarray:
        """Sine coefficients of ``d/dxi f`` from nodal values of ``f``.

        Uses ``<f', e_i> = -sqrt(2) i pi int f cos(i pi xi) dxi`` (the boundary
        term vanishes because ``e_i(0) = e_i(1) = 0``) with the composite
        trapezoid rule on the ``M + 2`` point grid.  ``left``/``right`` are
        the boundary values ``f(0)``, ``f(1)``; scalars or arrays broadcasting
        against the leading axes of ``interior``.
        """
        interior = np.asarray(interior, dtype=float)
        left = np.asarray(left, dtype=float)[..., None]
        right = np.asarray(right, dtype=float)[..., None]
        if self._dense:
            out = interior @ self._pairing_matrix
        else:
            full = np.concatenate(
                [np.zeros(interior.shape[:-1] + (1,)), interior, np.zeros(interior.shape[:-1] + (1,))],
                axis=-1,
            )
            y = scipy.fft.dct(full, type=1, axis=-1)[..., 1:-1]
            out = y * (0.5 * self._pairing_scale)
        boundary = 0.5 * (left + right * self._alternating) * self._pairing_scale
        return out + boundary

    def semigroup_factors(self, t: float) -> np.ndarray:
        return np.exp(-self.eigenvalues * t)

    def resolvent_factors(self, dt: float) -> np.ndarray:
        return 1.0 / (1.0 + dt * self.eigenvalues)


@lru_cache(maxsize=64)
def build_grid(modes: int) -> SpectralGrid:
    """Shared grid instance per mode count, so the cached transform matrices are reused."""
    return SpectralGrid(modes)


class Field:
    """State on the grid, held in either the nodal or the modal representation.

    Fields are values: operations return new Fields and never mutate.
    Conversions are computed on demand and cached.
    """

    __slots__ = ("grid", "_nodal", "_modal", "representation")

    def __init__(self, grid: SpectralGrid, *, nodal=None, modal=None):
        if (nodal is None) == (modal is None):
            raise InvalidArgument("give exactly one of nodal= or modal=")
        values = np.array(nodal if modal is None else modal, dtype=float)
        if values.shape != (grid.modes,):
            raise InvalidArgument(f"expected {grid.modes} values, got shape {values.shape}")
        values.setflags(write=False)
        self.grid = grid
        self._nodal = values if modal is None else None
        self._modal = values if nodal is None else None
        self.representation = "nodal" if modal is None else "modal"

    @classmethod
    def zeros(cls, grid):
        return cls(grid, modal=np.zeros(grid.modes))

    @classmethod
    def basis(cls, grid, i):
        """The eigenfunction ``e_i`` (1-based)."""
        if not 1 <= i <= grid.modes:
            raise InvalidArgument(f"mode index {i} outside 1..{grid.modes}")
        c = np.zeros(grid.modes)
        c[i - 1] = 1.0
        return cls(grid, modal=c)

    @classmethod
    def from_function(cls, grid, fn):
        return cls(grid, nodal=fn(grid.nodes))

    @property
    def modal(self) -> np.ndarray:
        if self._modal is None:
            m = self.grid.modal_from_nodal(self._nodal)
            m.setflags(write=False)
            self._modal = m
        return self._modal

    @property
    def nodal(self) -> np.ndarray:
        if self._nodal is None:
            v = self.grid.nodal_from_modal(self._modal)
            v.setflags(write=False)
            self._nodal = v
        return self._nodal

    def with_boundary(self) -> np.ndarray:
        """Nodal values on all ``M + 2`` points, including the zero boundary values."""
        return np.concatenate([[0.0], self.nodal, [0.0]])

    def l2_norm(self) -> float:
        return float(np.sqrt(np.sum(self.modal**2)))

    def quadrature_l2_norm(self) -> float:
        return float(np.sqrt(np.sum(self.nodal**2) * self.grid.spacing))

    def inner(self, other: "Field") -> float:
        _check_same_grid(self, other)
        return float(np.dot(self.modal, other.modal))

    def __add__(self, other):
        _check_same_grid(self, other)
        return Field(self.grid, modal=self.modal + other.modal)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return Field(self.grid, modal=self.modal - other.modal)

    def __mul__(self, scalar):
        return Field(self.grid, modal=self.modal * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.grid, modal=-self.modal)

    def __repr__(self):
        return f"Field(M={self.grid.modes}, {self.representation})"


def _check_same_grid(*fields):
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise InvalidArgument(f"grid mismatch: M={grid.modes} vs M={f.grid.modes}")


def to_modal(f: Field) -> Field:
    return Field(f.grid, modal=f.modal)


def from_modal(f: Field) -> Field:
    return Field(f.grid, nodal=f.nodal)


def apply_semigroup(t: float, f: Field) -> Field:
    """``e^{tA} f``."""
    if t < 0:
        raise InvalidArgument(f"semigroup time must be nonnegative, got {t}")
    if t == 0:
        return f
    return Field(f.grid, modal=f.modal * f.grid.semigroup_factors(t))


def apply_resolvent_power(n: int, dt: float, f: Field) -> Field:
    """``S_dt^n f`` with ``S_dt = (I - dt A)^{-1}``.

    ``n = 0`` is the identity.  The factor is applied ``n`` times rather than
    raised to a power, so ``n`` applications agree bit-for-bit with repeated
    single applications.
    """
    if dt <= 0:
        raise InvalidArgument(f"time step must be positive, got {dt}")
    if n < 0:
        raise InvalidArgument(f"resolvent power must be nonnegative, got {n}")
    r = f.grid.resolvent_factors(dt)
    c = np.array(f.modal)
    for _ in range(int(n)):
        c = c * r
    return Field(f.grid, modal=c)


def apply_frac_power(alpha: float, f: Field) -> Field:
    """``(-A)^alpha f``: mode ``i`` is multiplied by ``lambda_i ** alpha``."""
    if alpha == 0:
        return f
    return Field(f.grid, modal=f.modal * f.grid.eigenvalues**alpha)


def derivative_sine_coeffs(values_with_boundary, grid: SpectralGrid | None = None) -> np.ndarray:
    """Sine coefficients of ``d/dxi f`` given ``f`` at all ``M + 2`` grid points."""
    v = np.asarray(values_with_boundary, dtype=float)
    if v.ndim != 1 or v.size < 3:
        raise InvalidArgument("need nodal values at M + 2 >= 3 points including both boundaries")
    if grid is None:
        grid = build_grid(v.size - 2)
    elif v.size != grid.modes + 2:
        raise InvalidArgument(f"expected {grid.modes + 2} values, got {v.size}")
    return grid.derivative_pairing(v[1:-1], v[0], v[-1])


def hs_norm_frac_resolvent(beta: float, n: int, dt: float, modes: int) -> float:
    """Hilbert-Schmidt norm of ``(-A)^beta S_dt^n`` on the first ``modes`` modes."""
    if dt <= 0 or n < 1 or modes < 1:
        raise InvalidArgument("need dt > 0, n >= 1, modes >= 1")
    lam = build_grid(modes).eigenvalues
    log_terms = 2.0 * beta * np.log(lam) - 2.0 * n * np.log1p(dt * lam)
    return float(np.sqrt(np.sum(np.exp(log_terms))))
