"""Nemytskii coefficients: drift ``G = F1 + B F2``, diffusion ``sigma`` and the test functional.

Scalar functions are applied pointwise on the collocation nodes (no
dealiasing).  The Burgers part ``B F2`` goes through the cosine pairing of
:meth:`SpectralGrid.derivative_pairing`, never through termwise
differentiation of sine modes.

With ``delta > 0`` the regularized coefficients are used::

    G_delta     = e^{delta A} F1(e^{delta A} x) + B e^{delta A} F2(e^{delta A} x)
    sigma_delta = e^{delta A} sigma(e^{delta A} x) e^{delta A}

``B e^{delta A}`` is realized by damping the cosine coefficients of
``F2(...)`` with ``exp(-(i pi)^2 delta)`` before the pairing, which is the
same as damping the resulting sine coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .spectral import Field, SpectralGrid, _check_same_grid


@dataclass(frozen=True, eq=False)
class ScalarFunction:
    """A real function with its first three derivatives and declared sup-norm bounds.

    ``bounds[k]`` bounds the k-th derivative; ``None`` where unbounded.
    """

    name: str
    derivatives: tuple
    bounds: tuple = (None, None, None, None)
    kind: str = "general"  # "zero", "constant", "quadratic" enable special-case checks

    def __call__(self, u, order=0):
        if not 0 <= order <= 3:
            raise InvalidArgument(f"derivative order must be in 0..3, got {order}")
        return self.derivatives[order](u)

    @property
    def is_zero(self):
        return self.kind == "zero"

    @property
    def is_constant(self):
        return self.kind in ("zero", "constant")


def zero():
    z = lambda u: np.zeros_like(np.asarray(u, dtype=float))
    return ScalarFunction("zero", (z, z, z, z), (0.0, 0.0, 0.0, 0.0), kind="zero")


def constant(c):
    c = float(c)
    z = lambda u: np.zeros_like(np.asarray(u, dtype=float))
    return ScalarFunction(
        f"const({c:g})",
        (lambda u: np.full_like(np.asarray(u, dtype=float), c), z, z, z),
        (abs(c), 0.0, 0.0, 0.0),
        kind="zero" if c == 0 else "constant",
    )


def scaled_sin(a=1.0):
    a = float(a)
    return ScalarFunction(
        f"{a:g}*sin",
        (
            lambda u: a * np.sin(u),
            lambda u: a * np.cos(u),
            lambda u: -a * np.sin(u),
            lambda u: -a * np.cos(u),
        ),
        (abs(a),) * 4,
    )


def shifted_cos(c, a):
    """``c + a cos(u)``."""
    c, a = float(c), float(a)
    return ScalarFunction(
        f"{c:g}+{a:g}*cos",
        (
            lambda u: c + a * np.cos(u),
            lambda u: -a * np.sin(u),
            lambda u: -a * np.cos(u),
            lambda u: a * np.sin(u),
        ),
        (abs(c) + abs(a), abs(a), abs(a), abs(a)),
    )


def cosine():
    return shifted_cos(0.0, 1.0)


def square():
    z = lambda u: np.zeros_like(np.asarray(u, dtype=float))
    return ScalarFunction(
        "square",
        (lambda u: np.square(u), lambda u: 2.0 * np.asarray(u), lambda u: np.full_like(np.asarray(u, dtype=float), 2.0), z),
        (None, None, 2.0, 0.0),
        kind="quadratic",
    )


def identity_clamped(level=1.0):
    """``L tanh(u / L)``: bounded, equal to the identity to third order at 0."""
    L = float(level)

    def d1(u):
        return 1.0 / np.cosh(np.asarray(u) / L) ** 2

    def d2(u):
        t = np.tanh(np.asarray(u) / L)
        return -2.0 * t * (1.0 - t**2) / L

    def d3(u):
        t = np.tanh(np.asarray(u) / L)
        return -2.0 * (1.0 - t**2) * (1.0 - 3.0 * t**2) / L**2

    return ScalarFunction(
        f"identity-clamped({L:g})",
        (lambda u: L * np.tanh(np.asarray(u) / L), d1, d2, d3),
        (L, 1.0, 4.0 / (3.0 * np.sqrt(3.0) * L), 2.0 / L**2),
    )


@dataclass(frozen=True, eq=False)
class CoefficientBundle:
    """The scalar ingredients of the equation and of the test functional."""

    f1: ScalarFunction
    f2: ScalarFunction
    sigma: ScalarFunction
    phi: ScalarFunction
    name: str = "custom"

    @property
    def is_linear_additive(self) -> bool:
        """``G = 0`` and constant noise, so each mode is an independent scalar recursion."""
        return self.f1.is_zero and self.f2.is_zero and self.sigma.is_constant

    @property
    def sigma_constant(self) -> float:
        if not self.sigma.is_constant:
            raise InvalidArgument(f"bundle {self.name!r} has non-constant diffusion")
        return float(self.sigma(0.0))


def smooth_default() -> CoefficientBundle:
    s = scaled_sin(0.5)
    return CoefficientBundle(f1=s, f2=s, sigma=shifted_cos(0.5, 0.25), phi=cosine(), name="smooth-default")


def linear_additive(c=0.5) -> CoefficientBundle:
    return CoefficientBundle(f1=zero(), f2=zero(), sigma=constant(c), phi=square(), name="linear-additive")


def heat() -> CoefficientBundle:
    return CoefficientBundle(f1=zero(), f2=zero(), sigma=zero(), phi=square(), name="heat")


BUNDLES = {
    "smooth-default": smooth_default,
    "linear-additive": linear_additive,
    "heat": heat,
}


def get_bundle(name: str) -> CoefficientBundle:
    try:
        return BUNDLES[name]()
    except KeyError:
        raise InvalidArgument(f"unknown bundle {name!r}; choose from {sorted(BUNDLES)}") from None


@dataclass(frozen=True)
class RegularizationParams:
    delta: float = 0.0
    tau: float = 0.0

    def __post_init__(self):
        if self.delta < 0 or self.tau < 0:
            raise InvalidArgument(f"regularization times must be nonnegative, got {self}")


NO_REGULARIZATION = RegularizationParams()


class Linearization:
    """Coefficients and their derivatives frozen at a batch of states.

    ``x`` is an array of modal coefficients with shape ``(..., M)``.  Scalar
    function evaluations at the nodal values of ``e^{delta A} x`` are cached,
    so one instance serves the state, tangent and second-variation updates of
    a step.  All inputs and outputs are modal arrays.
    """

    def __init__(self, grid: SpectralGrid, bundle: CoefficientBundle, x, reg: RegularizationParams = NO_REGULARIZATION):
        self.grid = grid
        self.bundle = bundle
        self.reg = reg
        self._delta_f = grid.semigroup_factors(reg.delta) if reg.delta > 0 else None
        self._tau_f = grid.semigroup_factors(reg.tau) if reg.tau > 0 else None
        self.u = grid.nodal_from_modal(self.smooth(np.asarray(x, dtype=float)))
        self._cache = {}

    def smooth(self, a):
        return a if self._delta_f is None else a * self._delta_f

    def lift(self, h):
        """Nodal values of ``e^{delta A} h``."""
        return self.grid.nodal_from_modal(self.smooth(h))

    def value(self, fn: ScalarFunction, order: int):
        key = (id(fn), order)
        v = self._cache.get(key)
        if v is None:
            v = fn(self.u, order)
            self._cache[key] = v
        return v

    def _assemble(self, dt, reaction, burgers, noise, burgers_boundary=0.0):
        """``e^{delta A}[dt * modal(reaction) + dt * B(burgers) + e^{tau A} modal(noise)]``.

        Any of the nodal inputs may be ``None``; ``dt = None`` drops the factor.
        """
        g = self.grid
        scale = 1.0 if dt is None else dt
        out = None
        if self._tau_f is None:
            nodal = _axpy(scale, reaction, noise)
            if nodal is not None:
                out = g.modal_from_nodal(nodal)
        else:
            if reaction is not None:
                out = scale * g.modal_from_nodal(reaction)
            if noise is not None:
                n = g.modal_from_nodal(noise) * self._tau_f
                out = n if out is None else out + n
        if burgers is not None:
            b = g.derivative_pairing(burgers, burgers_boundary, burgers_boundary)
            b = b if dt is None else dt * b
            out = b if out is None else out + b
        if out is None:
            out = np.zeros(np.broadcast_shapes(self.u.shape))
        return self.smooth(out)

    # -- drift -----------------------------------------------------------

    def drift(self):
        b = self.bundle
        reaction = None if b.f1.is_zero else self.value(b.f1, 0)
        burgers = None if b.f2.is_zero else self.value(b.f2, 0)
        edge = 0.0 if b.f2.is_zero else float(b.f2(0.0))
        return self._assemble(None, reaction, burgers, None, edge)

    def drift_d1(self, h):
        b = self.bundle
        if b.f1.is_zero and b.f2.is_zero:
            return np.zeros(np.broadcast_shapes(self.u.shape, np.shape(h)))
        hn = self.lift(h)
        reaction = None if b.f1.is_zero else self.value(b.f1, 1) * hn
        burgers = None if b.f2.is_zero else self.value(b.f2, 1) * hn
        return self._assemble(None, reaction, burgers, None)

    def drift_d2(self, h, k):
        b = self.bundle
        if b.f1.is_zero and b.f2.is_zero:
            return np.zeros(np.broadcast_shapes(self.u.shape, np.shape(h)))
        hk = self.lift(h) * self.lift(k)
        reaction = None if b.f1.is_zero else self.value(b.f1, 2) * hk
        burgers = None if b.f2.is_zero else self.value(b.f2, 2) * hk
        return self._assemble(None, reaction, burgers, None)

    # -- diffusion -------------------------------------------------------

    def diffusion(self, w, *dirs, noise_smoothing=False):
        """``sigma_delta^{(d)}(x).(dirs) w`` with ``d = len(dirs)``.

        With ``noise_smoothing`` the result is also multiplied by ``e^{tau A}``.
        """
        noise = self._diffusion_nodal(w, dirs)
        if noise is None:
            return np.zeros(np.broadcast_shapes(self.u.shape, np.shape(w)))
        out = self.smooth(self.grid.modal_from_nodal(noise))
        if noise_smoothing and self._tau_f is not None:
            out = out * self._tau_f
        return out

    def _diffusion_nodal(self, w, dirs):
        s = self.bundle.sigma
        d = len(dirs)
        if s.is_zero or (d > 0 and s.is_constant):
            return None
        out = self.value(s, d) * self.lift(w)
        if d == 1:
            out = out * self.lift(dirs[0])
        elif d == 2:
            out = out * (self.lift(dirs[0]) * self.lift(dirs[1]))  # grouped so (h, k) is exactly symmetric
        return out

    # -- scheme pieces ---------------------------------------------------

    def increment(self, dt, dw):
        """``dt G_delta(x) + e^{tau A} sigma_delta(x) dw``; apply ``S_dt`` to finish a step."""
        b = self.bundle
        reaction = None if b.f1.is_zero else self.value(b.f1, 0)
        burgers = None if b.f2.is_zero else self.value(b.f2, 0)
        edge = 0.0 if b.f2.is_zero else float(b.f2(0.0))
        noise = self._diffusion_nodal(dw, ())
        return self._assemble(dt, reaction, burgers, noise, edge)

    def tangent_increment(self, dt, dw, z):
        """``dt G'_delta(x).z + e^{tau A}(sigma'_delta(x).z) dw`` (linear in ``z``)."""
        b = self.bundle
        zn = None
        reaction = burgers = None
        if not b.f1.is_zero:
            zn = self.lift(z)
            reaction = self.value(b.f1, 1) * zn
        if not b.f2.is_zero:
            zn = self.lift(z) if zn is None else zn
            burgers = self.value(b.f2, 1) * zn
        noise = None
        if not b.sigma.is_constant:
            zn = self.lift(z) if zn is None else zn
            noise = self.value(b.sigma, 1) * zn * self.lift(dw)
        if reaction is None and burgers is None and noise is None:
            return np.zeros(np.broadcast_shapes(self.u.shape, np.shape(z)))
        return self._assemble(dt, reaction, burgers, noise)

    def second_increment(self, dt, dw, h, k):
        """``dt G''_delta(x).(h, k) + e^{tau A}(sigma''_delta(x).(h, k)) dw``."""
        b = self.bundle
        hk = None
        reaction = burgers = noise = None
        if not (b.f1.is_zero and b.f2.is_zero and b.sigma.is_constant):
            hk = self.lift(h) * self.lift(k)
        if not b.f1.is_zero:
            reaction = self.value(b.f1, 2) * hk
        if not b.f2.is_zero:
            burgers = self.value(b.f2, 2) * hk
        if not b.sigma.is_constant:
            noise = self.value(b.sigma, 2) * hk * self.lift(dw)
        if hk is None:
            return np.zeros(np.broadcast_shapes(self.u.shape, np.shape(h)))
        return self._assemble(dt, reaction, burgers, noise)

    # -- test functional -------------------------------------------------

    def phi(self):
        """``phi_delta(x)`` by the trapezoid rule (boundary values of ``x`` are 0)."""
        g = self.grid
        phi = self.bundle.phi
        interior = np.sum(self.value(phi, 0), axis=-1)
        return g.spacing * (interior + float(phi(0.0)))

    def phi_gradient(self):
        """Modal vector ``g`` with ``D phi_delta(x).v = <g, v>`` for modal ``v``."""
        return self.smooth(self.grid.modal_from_nodal(self.value(self.bundle.phi, 1)))

    def phi_d1(self, h):
        return np.sum(self.phi_gradient() * h, axis=-1)

    def phi_d2(self, h, k):
        g = self.grid
        return g.spacing * np.sum(self.value(self.bundle.phi, 2) * (self.lift(h) * self.lift(k)), axis=-1)


def _axpy(a, x, y):
    if x is None:
        return y
    if y is None:
        return x if a == 1.0 else a * x
    return (x if a == 1.0 else a * x) + y


# -- Field-level API -----------------------------------------------------

_FUNCTION_SLOTS = ("f1", "f2", "sigma", "phi")


def _resolve(bundle, fn):
    if isinstance(fn, ScalarFunction):
        return fn
    if fn in _FUNCTION_SLOTS:
        return getattr(bundle, fn)
    raise InvalidArgument(f"unknown coefficient {fn!r}; expected one of {_FUNCTION_SLOTS}")


def nemytskii(fn: ScalarFunction, order: int, x: Field, factors=()) -> Field:
    """Pointwise ``fn^{(order)}(x(xi)) * prod(factors)(xi)`` on the nodes."""
    if len(factors) != order:
        raise InvalidArgument(f"order {order} needs {order} factors, got {len(factors)}")
    _check_same_grid(x, *factors)
    out = fn(x.nodal, order)
    if factors:
        prod = factors[0].nodal
        for h in factors[1:]:
            prod = prod * h.nodal
        out = out * prod
    return Field(x.grid, nodal=out)


def drift_G(bundle: CoefficientBundle, x: Field, reg: RegularizationParams = NO_REGULARIZATION) -> Field:
    return Field(x.grid, modal=Linearization(x.grid, bundle, x.modal, reg).drift())


def drift_G_d1(bundle, x: Field, h: Field, reg=NO_REGULARIZATION) -> Field:
    _check_same_grid(x, h)
    return Field(x.grid, modal=Linearization(x.grid, bundle, x.modal, reg).drift_d1(h.modal))


def drift_G_d2(bundle, x: Field, h: Field, k: Field, reg=NO_REGULARIZATION) -> Field:
    _check_same_grid(x, h, k)
    return Field(x.grid, modal=Linearization(x.grid, bundle, x.modal, reg).drift_d2(h.modal, k.modal))


def diffusion_apply(bundle, order: int, x: Field, dirs, w: Field, reg=NO_REGULARIZATION) -> Field:
    if order not in (0, 1, 2) or len(dirs) != order:
        raise InvalidArgument(f"diffusion order must be 0..2 with matching directions, got {order}, {len(dirs)}")
    _check_same_grid(x, w, *dirs)
    lin = Linearization(x.grid, bundle, x.modal, reg)
    return Field(x.grid, modal=lin.diffusion(w.modal, *(h.modal for h in dirs)))


def test_functional(bundle, order: int, x: Field, dirs=(), delta: float = 0.0) -> float:
    """``D^{(order)} phi_delta(x).(dirs)`` with ``phi(x) = int_0^1 phi~(x(xi)) dxi``."""
    if order not in (0, 1, 2) or len(dirs) != order:
        raise InvalidArgument(f"test functional order must be 0..2 with matching directions, got {order}, {len(dirs)}")
    _check_same_grid(x, *dirs)
    lin = Linearization(x.grid, bundle, x.modal, RegularizationParams(delta=delta))
    if order == 0:
        return float(lin.phi())
    if order == 1:
        return float(lin.phi_d1(dirs[0].modal))
    return float(lin.phi_d2(dirs[0].modal, dirs[1].modal))


test_functional.__test__ = False  # keep pytest from collecting it
