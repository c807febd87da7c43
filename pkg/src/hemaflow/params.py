"""Model ingredients: maturation velocity, division map, rates, and kernels.

Everything here is declarative: these classes validate and describe the model
but perform no quadrature. The heavy lifting (flow coordinates, attenuation
integrals) lives in :mod:`hemaflow.flow` and :mod:`hemaflow.kernels`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import ConfigurationError

ScalarField = Union[float, Callable]


def as_field(f: ScalarField) -> Callable:
    """Normalize a constant or callable into a vectorized callable."""
    if callable(f):
        def wrapped(m):
            m = np.asarray(m, dtype=float)
            out = np.asarray(f(m), dtype=float)
            if out.shape != m.shape:
                out = np.broadcast_to(out, m.shape).copy()
            return out
        wrapped.base = f
        return wrapped
    value = float(f)

    def const(m):
        m = np.asarray(m, dtype=float)
        return np.full(m.shape, value)
    const.base = value
    return const


def _describe_field(f: ScalarField):
    if callable(f):
        return getattr(f, "__qualname__", None) or repr(f)
    return float(f)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


# ---------------------------------------------------------------------------
# maturation velocity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerLawVelocity:
    """V(m) = alpha * m**p with alpha > 0 and p >= 1.

    For p >= 1 the time to reach any positive maturity from zero diverges,
    so the zero-maturity state is never left; no numerical screening needed.
    """

    alpha: float
    p: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0.0):
            raise ConfigurationError("velocity.alpha must be > 0")
        if not (self.p >= 1.0):
            raise ConfigurationError("velocity.p must be >= 1")

    def __call__(self, m):
        m = np.asarray(m, dtype=float)
        return self.alpha * m ** self.p

    def derivative(self, m):
        m = np.asarray(m, dtype=float)
        if self.p == 1.0:
            return np.full(m.shape, self.alpha)
        return self.alpha * self.p * m ** (self.p - 1.0)

    def describe(self):
        return {"kind": "power_law", "alpha": self.alpha, "p": self.p}


@dataclass(frozen=True)
class CustomVelocity:
    """User-supplied velocity with its derivative.

    Must satisfy V(0) = 0 and V > 0 on (0, 1]. The divergence of the
    crossing-time integral near zero is screened numerically when flow
    coordinates are built; it cannot be certified, only screened.
    """

    V: Callable
    V_prime: Callable
    name: str = "custom"

    def __call__(self, m):
        m = np.asarray(m, dtype=float)
        out = np.asarray(self.V(m), dtype=float)
        return np.broadcast_to(out, m.shape).copy() if out.shape != m.shape else out

    def derivative(self, m):
        m = np.asarray(m, dtype=float)
        out = np.asarray(self.V_prime(m), dtype=float)
        return np.broadcast_to(out, m.shape).copy() if out.shape != m.shape else out

    def describe(self):
        return {"kind": "custom", "name": self.name}


VelocityModel = Union[PowerLawVelocity, CustomVelocity]


def validate_velocity(v: VelocityModel) -> None:
    if abs(float(np.asarray(v(0.0)))) > 1e-12:
        raise ConfigurationError("velocity must vanish at m = 0")
    samples = np.linspace(1e-6, 1.0, 257)
    if np.any(v(samples) <= 0.0):
        raise ConfigurationError("velocity must be positive on (0, 1]")


# ---------------------------------------------------------------------------
# division maturity map
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearMaturityMap:
    """g(m) = c*m: a daughter is born at fraction c of the mother's maturity."""

    c: float

    def __post_init__(self):
        if not (0.0 < self.c < 1.0):
            raise ConfigurationError("maturity map fraction c must lie in (0, 1)")

    @property
    def g1(self) -> float:
        return self.c

    def __call__(self, m):
        return self.c * np.asarray(m, dtype=float)

    def inverse(self, y):
        """Mother maturity for daughter maturity y, extended by 1 above g(1)."""
        y = np.asarray(y, dtype=float)
        return np.minimum(y / self.c, 1.0)

    def describe(self):
        return {"kind": "linear", "c": self.c}


@dataclass(frozen=True)
class CustomMaturityMap:
    """User-supplied strictly increasing g with g(m) < m on (0, 1)."""

    g: Callable
    g_inv: Callable
    name: str = "custom"

    @property
    def g1(self) -> float:
        return float(np.asarray(self.g(1.0)))

    def __call__(self, m):
        m = np.asarray(m, dtype=float)
        out = np.asarray(self.g(m), dtype=float)
        return np.broadcast_to(out, m.shape).copy() if out.shape != m.shape else out

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        g1 = self.g1
        inner = np.asarray(self.g_inv(np.minimum(y, g1)), dtype=float)
        inner = np.broadcast_to(inner, y.shape).copy() if inner.shape != y.shape else inner
        return np.where(y > g1, 1.0, np.minimum(inner, 1.0))

    def describe(self):
        return {"kind": "custom", "name": self.name}


MaturityMap = Union[LinearMaturityMap, CustomMaturityMap]


def validate_maturity_map(g: MaturityMap) -> None:
    g1 = g.g1
    if not (0.0 < g1 < 1.0):
        raise ConfigurationError("g(1) must lie strictly inside (0, 1)")
    m = np.linspace(0.0, 1.0, 513)
    vals = g(m)
    if np.any(np.diff(vals) <= 0.0):
        raise ConfigurationError("g must be strictly increasing on [0, 1]")
    interior = m[1:-1]
    if np.any(g(interior) >= interior):
        raise ConfigurationError("g(m) < m must hold on (0, 1)")
    if abs(float(np.asarray(g(0.0)))) > 1e-12:
        raise ConfigurationError("g(0) must be 0")
    # inverse consistency on [0, g(1)]
    y = np.linspace(0.0, g1, 129)
    back = g(g.inverse(y))
    if np.max(np.abs(back - y)) > 1e-8:
        raise ConfigurationError("g_inv is not a consistent inverse of g on [0, g(1)]")


# ---------------------------------------------------------------------------
# mortality rates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateFunctions:
    """Resting-phase death rate delta(m) and proliferating-phase rate gamma(m)."""

    delta: ScalarField = 0.0
    gamma: ScalarField = 0.0

    def delta_fn(self) -> Callable:
        return as_field(self.delta)

    def gamma_fn(self) -> Callable:
        return as_field(self.gamma)

    def validate(self) -> None:
        m = np.linspace(0.0, 1.0, 257)
        if np.any(self.delta_fn()(m) < 0.0):
            raise ConfigurationError("delta must be nonnegative on [0, 1]")
        if np.any(self.gamma_fn()(m) < 0.0):
            raise ConfigurationError("gamma must be nonnegative on [0, 1]")

    def describe(self):
        return {"delta": _describe_field(self.delta), "gamma": _describe_field(self.gamma)}


# ---------------------------------------------------------------------------
# reintroduction law  beta(m, N)
# ---------------------------------------------------------------------------

class _LawBase:
    def rate(self, m, x):
        raise NotImplementedError

    def lipschitz(self, g1: float) -> float:
        """Global Lipschitz constant of x -> x*beta(m, x) over m in [0, g1]."""
        raise NotImplementedError


def _max_field(f: Callable, lo: float, hi: float, n: int = 2049) -> float:
    m = np.linspace(lo, hi, n)
    vals = f(m)
    j = int(np.argmax(vals))
    # golden-section polish around the best sample
    a = m[max(j - 1, 0)]
    b = m[min(j + 1, n - 1)]
    phi = 0.5 * (np.sqrt(5.0) - 1.0)
    c, d = b - phi * (b - a), a + phi * (b - a)
    fc, fd = float(f(c)), float(f(d))
    for _ in range(80):
        if fc < fd:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = float(f(d))
        else:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = float(f(c))
        if b - a < 1e-13 * max(1.0, abs(b)):
            break
    return max(float(np.max(vals)), fc, fd)


@dataclass(frozen=True)
class HillReintroduction(_LawBase):
    """beta(m, N) = beta0(m) * theta^n / (theta^n + N^n).

    The standard saturable reintroduction law: decreasing in N, with an
    analytic Lipschitz constant for x -> x*beta(m, x).
    """

    beta0: ScalarField = 1.0
    theta: float = 1.0
    n: float = 1.0

    def __post_init__(self):
        if not (self.theta > 0.0):
            raise ConfigurationError("beta.theta must be > 0")
        if not (self.n >= 1.0):
            raise ConfigurationError("beta.n must be >= 1")

    def rate(self, m, x):
        m = np.asarray(m, dtype=float)
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        tn = self.theta ** self.n
        return as_field(self.beta0)(m) * tn / (tn + x ** self.n)

    def lipschitz(self, g1: float) -> float:
        b0 = _max_field(as_field(self.beta0), 0.0, g1)
        n = self.n
        # sup_x |d/dx (x/(1+x^n))| is 1 at x=0, or (n-1)^2/(4n) at the
        # interior dip when n exceeds 3 + 2*sqrt(2)
        shape = max(1.0, (n - 1.0) ** 2 / (4.0 * n))
        return b0 * shape

    def describe(self):
        return {"kind": "hill", "beta0": _describe_field(self.beta0),
                "theta": self.theta, "n": self.n}


@dataclass(frozen=True)
class ConstantReintroduction(_LawBase):
    """beta(m, N) = beta0(m), independent of the population."""

    beta0: ScalarField = 0.0

    def rate(self, m, x):
        m = np.asarray(m, dtype=float)
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(as_field(self.beta0)(m), np.broadcast_shapes(m.shape, x.shape)).copy()

    def lipschitz(self, g1: float) -> float:
        return _max_field(as_field(self.beta0), 0.0, g1)

    def describe(self):
        return {"kind": "constant", "beta0": _describe_field(self.beta0)}


@dataclass(frozen=True)
class CustomReintroduction(_LawBase):
    """Arbitrary beta(m, N); the Lipschitz constant of x*beta must be declared."""

    fn: Callable
    lipschitz_bound: Optional[float] = None
    name: str = "custom"

    def rate(self, m, x):
        m = np.asarray(m, dtype=float)
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        out = np.asarray(self.fn(m, x), dtype=float)
        shape = np.broadcast_shapes(m.shape, x.shape)
        return np.broadcast_to(out, shape).copy() if out.shape != shape else out

    def lipschitz(self, g1: float) -> float:
        if self.lipschitz_bound is None:
            raise ConfigurationError(
                "custom reintroduction law needs a declared Lipschitz constant")
        return float(self.lipschitz_bound)

    def describe(self):
        return {"kind": "custom", "name": self.name,
                "lipschitz_bound": self.lipschitz_bound}


ReintroductionLaw = Union[HillReintroduction, ConstantReintroduction, CustomReintroduction]


# ---------------------------------------------------------------------------
# division kernel  k(m, a) on [0,1] x [tau_lower, tau_upper]
# ---------------------------------------------------------------------------

def _check_delays(tau_lower, tau_upper):
    if not (0.0 < tau_lower < tau_upper < np.inf):
        raise ConfigurationError(
            "division delays must satisfy 0 < tau_lower < tau_upper < inf "
            f"(got {tau_lower}, {tau_upper})")


@dataclass(frozen=True)
class SeparableUniformKernel:
    """k(m, a) = kappa(m) / (tau_upper - tau_lower), age-uniform.

    kappa is cut to zero at g(1) with a C1 taper over the trailing
    ``taper`` fraction of [0, g(1)] so that k stays continuous.
    """

    tau_lower: float
    tau_upper: float
    kappa: ScalarField = 1.0
    taper: float = 0.02

    def __post_init__(self):
        _check_delays(self.tau_lower, self.tau_upper)
        if not (0.0 < self.taper < 1.0):
            raise ConfigurationError("kernel taper fraction must lie in (0, 1)")

    def age_weight(self, a):
        a = np.asarray(a, dtype=float)
        return np.full(a.shape, 1.0 / (self.tau_upper - self.tau_lower))

    def maturity_weight(self, m, g1: float):
        m = np.asarray(m, dtype=float)
        raw = as_field(self.kappa)(m)
        m0 = g1 * (1.0 - self.taper)
        fade = 1.0 - _smoothstep((m - m0) / (g1 - m0))
        return np.where(m >= g1, 0.0, raw * fade)

    def k(self, m, a, g1: float):
        m = np.asarray(m, dtype=float)
        a = np.asarray(a, dtype=float)
        return self.maturity_weight(m, g1) * self.age_weight(a)

    def describe(self):
        return {"kind": "separable_uniform", "kappa": _describe_field(self.kappa),
                "taper": self.taper, "tau_lower": self.tau_lower,
                "tau_upper": self.tau_upper}


@dataclass(frozen=True)
class SeparableKernel:
    """k(m, a) = kappa(m) * rho(a) with a caller-chosen age density rho."""

    tau_lower: float
    tau_upper: float
    kappa: ScalarField
    age_density: Callable
    taper: float = 0.02

    def __post_init__(self):
        _check_delays(self.tau_lower, self.tau_upper)
        if not (0.0 < self.taper < 1.0):
            raise ConfigurationError("kernel taper fraction must lie in (0, 1)")

    def age_weight(self, a):
        a = np.asarray(a, dtype=float)
        out = np.asarray(self.age_density(a), dtype=float)
        return np.broadcast_to(out, a.shape).copy() if out.shape != a.shape else out

    def maturity_weight(self, m, g1: float):
        m = np.asarray(m, dtype=float)
        raw = as_field(self.kappa)(m)
        m0 = g1 * (1.0 - self.taper)
        fade = 1.0 - _smoothstep((m - m0) / (g1 - m0))
        return np.where(m >= g1, 0.0, raw * fade)

    def k(self, m, a, g1: float):
        return self.maturity_weight(m, g1) * self.age_weight(a)

    def describe(self):
        return {"kind": "separable", "kappa": _describe_field(self.kappa),
                "taper": self.taper, "tau_lower": self.tau_lower,
                "tau_upper": self.tau_upper}


@dataclass(frozen=True)
class CustomDivisionKernel:
    """Arbitrary continuous k(m, a); forced to zero for m >= g(1)."""

    tau_lower: float
    tau_upper: float
    fn: Callable = None
    name: str = "custom"

    def __post_init__(self):
        _check_delays(self.tau_lower, self.tau_upper)
        if self.fn is None:
            raise ConfigurationError("custom division kernel needs a callable")

    def k(self, m, a, g1: float):
        m = np.asarray(m, dtype=float)
        a = np.asarray(a, dtype=float)
        out = np.asarray(self.fn(m, a), dtype=float)
        shape = np.broadcast_shapes(m.shape, a.shape)
        out = np.broadcast_to(out, shape).copy() if out.shape != shape else out
        return np.where(np.broadcast_to(m, shape) >= g1, 0.0, out)

    def describe(self):
        return {"kind": "custom", "name": self.name,
                "tau_lower": self.tau_lower, "tau_upper": self.tau_upper}


DivisionKernel = Union[SeparableUniformKernel, SeparableKernel, CustomDivisionKernel]


# ---------------------------------------------------------------------------
# the assembled model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelParams:
    """Everything that defines one model instance."""

    velocity: VelocityModel
    maturity: MaturityMap
    rates: RateFunctions = field(default_factory=RateFunctions)
    reintroduction: ReintroductionLaw = field(default_factory=lambda: ConstantReintroduction(0.0))
    division: DivisionKernel = None

    def __post_init__(self):
        if self.division is None:
            raise ConfigurationError("a division kernel (with its delays) is required")
        validate_velocity(self.velocity)
        validate_maturity_map(self.maturity)
        self.rates.validate()
        self._probe_reintroduction()
        self._probe_division()

    def _probe_reintroduction(self):
        m = np.linspace(0.0, 1.0, 65)
        levels = np.array([0.0, 0.5, 1.0, 4.0, 20.0])
        vals = np.stack([self.reintroduction.rate(m, np.full(m.shape, x))
                         for x in levels])
        if np.any(vals < 0.0):
            raise ConfigurationError("beta must be nonnegative")
        if np.any(np.diff(vals, axis=0) > 1e-12):
            raise ConfigurationError(
                "beta must be nonincreasing in the population argument")

    def _probe_division(self):
        g1 = self.maturity.g1
        m = np.linspace(0.0, 1.0, 65)
        ages = np.linspace(self.tau_lower, self.tau_upper, 17)
        vals = self.division.k(m[None, :], ages[:, None], g1)
        if np.any(vals < 0.0):
            raise ConfigurationError("division kernel k must be nonnegative")
        if np.any(np.abs(vals[:, m >= g1]) > 0.0):
            raise ConfigurationError("division kernel k must vanish for m >= g(1)")

    @property
    def tau_lower(self) -> float:
        return self.division.tau_lower

    @property
    def tau_upper(self) -> float:
        return self.division.tau_upper

    @property
    def g1(self) -> float:
        return self.maturity.g1

    def describe(self) -> dict:
        return {
            "velocity": self.velocity.describe(),
            "maturity": self.maturity.describe(),
            "rates": self.rates.describe(),
            "reintroduction": self.reintroduction.describe(),
            "division": self.division.describe(),
        }

    def digest(self) -> str:
        """Reproducibility hash of the declarative description.

        Custom callables contribute only their qualified names; structured
        (CLI-built) models hash deterministically.
        """
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
