"""Method-of-steps solver for the integrated delay formulation.

For times past the history depth tau_upper the resting-phase population
satisfies the fixed-point relation

    N(t, m) = phi(tau_upper, pi_{-(t - tau_upper)}(m)) * K(t - tau_upper, m)
              + G(N)(t, m) - J(N)(t, m)

where G collects division influx (delayed, nonlocal in maturity) and J the
reintroduction outflux along the flow. The solve advances in windows of
length tau_lower: inside a window every G evaluation reaches only into
finalized history, so the window reduces to a Picard iteration on J alone,
whose contraction constant scales with the window length.

Both running integrals are accumulated along characteristics: the attenuation
tables make the flow factorization of K exact, so one step costs a single
re-interpolation of the accumulated field at x * exp(-dt) plus a trapezoid
increment. Direct (quadrature-from-scratch) evaluators ``eval_G`` and
``eval_J`` are kept alongside as the slow reference form.

The maturity grid is uniform in the flow coordinate x = h(m); slices
interpolate monotone-cubically in x and linearly in t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import (ConfigurationError, ConvergenceError, DomainError,
                     HistoryWindowError)
from .flow import FlowMap
from .kernels import Kernels
from .params import ModelParams
from .quadrature import gauss_legendre, mapped_rule

_TIME_SNAP = 1e-9


def _eval_two_arg(fn: Callable, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Evaluate fn on broadcast arrays, falling back to np.vectorize."""
    shape = np.broadcast_shapes(a.shape, b.shape)
    try:
        out = np.asarray(fn(a, b), dtype=float)
        if out.shape == shape:
            return out
        return np.broadcast_to(out, shape).copy()
    except (ValueError, TypeError):
        return np.vectorize(fn, otypes=[float])(a, b)


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform-in-x maturity grid plus the time step.

    The time step must divide tau_lower (window length) and tau_upper
    (history depth) so that windows and the history edge land on slices.
    """

    x_nodes: np.ndarray
    m_nodes: np.ndarray
    band_x: np.ndarray
    band_m: np.ndarray
    dt: float
    tau_lower: float
    tau_upper: float

    def __post_init__(self):
        for name, n_steps in (("tau_lower", self.tau_lower / self.dt),
                              ("tau_upper", self.tau_upper / self.dt)):
            if abs(n_steps - round(n_steps)) > 1e-9 * max(1.0, n_steps):
                raise ConfigurationError(
                    f"dt must divide {name}: {name}/dt = {n_steps:.12g} is not "
                    "an integer (adjust dt_divisor)")
        if self.x_nodes.size < 8:
            raise ConfigurationError("need at least 8 maturity nodes")
        if np.any(np.diff(self.m_nodes) <= 0.0):
            raise ConfigurationError("maturity nodes must be strictly increasing")

    @property
    def n_window(self) -> int:
        return round(self.tau_lower / self.dt)

    @property
    def n_history(self) -> int:
        return round(self.tau_upper / self.dt)

    @property
    def x_full(self) -> np.ndarray:
        return np.concatenate([self.x_nodes, self.band_x[1:]])

    @property
    def m_full(self) -> np.ndarray:
        return np.concatenate([self.m_nodes, self.band_m[1:]])

    @classmethod
    def build(cls, flow: FlowMap, tau_lower: float, tau_upper: float, *,
              m_nodes: int = 512, dt_divisor: int = 64) -> "Grid":
        if not (0.0 < tau_lower < tau_upper):
            raise ConfigurationError("delays must satisfy 0 < tau_lower < tau_upper")
        top = float(flow.h(flow.g1))
        xs = np.linspace(0.0, top, m_nodes)
        ms = np.asarray(flow.h_inv(xs))
        ms[0], ms[-1] = 0.0, flow.g1
        spacing = xs[1] - xs[0]
        n_band = max(2, int(math.ceil((1.0 - top) / spacing)) + 1)
        bx = np.linspace(top, 1.0, n_band)
        bm = np.asarray(flow.h_inv(bx))
        bm[0], bm[-1] = flow.g1, 1.0
        return cls(x_nodes=xs, m_nodes=ms, band_x=bx, band_m=bm,
                   dt=tau_lower / dt_divisor,
                   tau_lower=tau_lower, tau_upper=tau_upper)

    def describe(self) -> dict:
        return {"m_nodes": int(self.x_nodes.size), "dt": self.dt,
                "tau_lower": self.tau_lower, "tau_upper": self.tau_upper,
                "band_nodes": int(self.band_x.size)}


# ---------------------------------------------------------------------------
# time-indexed slice stacks
# ---------------------------------------------------------------------------

class _SliceStack:
    """Slices on a fixed x-grid at uniform times i*dt, with cached interpolants."""

    def __init__(self, x: np.ndarray, dt: float, capacity: Optional[int] = None):
        self.x = x
        self.dt = dt
        self.capacity = capacity
        self.start_index = 0
        self._values: list = []
        self._interp: list = []

    def __len__(self):
        return len(self._values)

    @property
    def last_index(self) -> int:
        return self.start_index + len(self._values) - 1

    def append(self, values: np.ndarray) -> None:
        self._values.append(np.asarray(values, dtype=float))
        self._interp.append(None)
        if self.capacity is not None and len(self._values) > self.capacity:
            self._values.pop(0)
            self._interp.pop(0)
            self.start_index += 1

    def values_at(self, index: int) -> np.ndarray:
        return self._values[index - self.start_index]

    def interpolant(self, index: int) -> PchipInterpolator:
        k = index - self.start_index
        if self._interp[k] is None:
            self._interp[k] = PchipInterpolator(self.x, self._values[k], extrapolate=False)
        return self._interp[k]

    def lookup(self, t: float, xq: np.ndarray) -> np.ndarray:
        """Field value at time t (linear between slices) and coordinates xq."""
        pos = t / self.dt
        i = math.floor(pos + _TIME_SNAP)
        theta = pos - i
        if theta < _TIME_SNAP:
            theta = 0.0
        lo, hi = self.start_index, self.last_index
        if i < lo or i > hi or (theta > 0.0 and i + 1 > hi):
            raise HistoryWindowError(
                f"lookup at t = {t:.9g} falls outside stored slices "
                f"[{lo * self.dt:.9g}, {hi * self.dt:.9g}]")
        base = self.interpolant(i)(xq)
        if theta == 0.0:
            return base
        return (1.0 - theta) * base + theta * self.interpolant(i + 1)(xq)


class HistoryField(_SliceStack):
    """Sliding ring of recent slices feeding the delayed lookups.

    Capacity defaults to ceil(2 * tau_upper / dt) + 2 slices in the solver,
    enough to serve every (s - a) reach of the division integral.
    """


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------

@dataclass
class InitialHistory:
    """The datum phi on [0, tau_upper] x [0, g(1)], gridded.

    ``upper`` optionally carries the band (g(1), 1] on the grid's band
    nodes; it is transported passively and only feeds the proliferating
    phase reconstruction.
    """

    times: np.ndarray
    values: np.ndarray
    upper: Optional[np.ndarray] = None

    def sup(self) -> float:
        s = float(np.max(np.abs(self.values))) if self.values.size else 0.0
        if self.upper is not None and self.upper.size:
            s = max(s, float(np.max(np.abs(self.upper))))
        return s

    @classmethod
    def from_callable(cls, phi: Callable, grid: Grid, *,
                      upper: Optional[Callable] = None) -> "InitialHistory":
        times = np.arange(grid.n_history + 1) * grid.dt
        tt = times[:, None]
        vals = _eval_two_arg(phi, tt, grid.m_nodes[None, :])
        if not np.all(np.isfinite(vals)):
            raise ConfigurationError("history values must be finite")
        up = None
        if upper is not None:
            up = _eval_two_arg(upper, tt, grid.band_m[None, :])
        return cls(times=times, values=vals, upper=up)

    @classmethod
    def zeros(cls, grid: Grid, *, with_upper: bool = False) -> "InitialHistory":
        times = np.arange(grid.n_history + 1) * grid.dt
        up = np.zeros((times.size, grid.band_m.size)) if with_upper else None
        return cls(times=times, values=np.zeros((times.size, grid.m_nodes.size)),
                   upper=up)


@dataclass
class WarmupData:
    """Age-density initial data for producing the history by simulation.

    ``N0`` is the age-integral of the resting-phase density at t = 0,
    supplied directly (the decay of the age tail is not constructively
    integrable). ``Upsilon`` may be carried for the record but is never
    evaluated. ``Gamma`` must be continuous on [0, 1] x [0, tau_upper].
    """

    Gamma: Callable
    N0: Callable
    Upsilon: Optional[Callable] = None


# ---------------------------------------------------------------------------
# solution record
# ---------------------------------------------------------------------------

@dataclass
class UpperBand:
    x: np.ndarray
    m: np.ndarray
    N: np.ndarray
    P: Optional[np.ndarray] = None


class SolutionField:
    """Full record of N (and optionally P) on [0, T] x [0, g(1)]."""

    def __init__(self, times, x, m, N, P=None, upper: Optional[UpperBand] = None,
                 metadata: Optional[dict] = None):
        self.times = np.asarray(times, dtype=float)
        self.x = np.asarray(x, dtype=float)
        self.m = np.asarray(m, dtype=float)
        self.N = np.asarray(N, dtype=float)
        self.P = None if P is None else np.asarray(P, dtype=float)
        self.upper = upper
        self.metadata = metadata or {}
        self._interp_cache: dict = {}
        self._combined_cache: dict = {}

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def sup(self) -> float:
        return float(np.max(np.abs(self.N)))

    def _index(self, t: float):
        pos = t / self.dt
        i = math.floor(pos + _TIME_SNAP)
        theta = pos - i
        if theta < _TIME_SNAP:
            theta = 0.0
        if i < 0 or i + (1 if theta > 0.0 else 0) >= self.times.size:
            raise HistoryWindowError(f"time {t:.9g} outside the recorded range")
        return i, theta

    def _main_interp(self, i: int) -> PchipInterpolator:
        f = self._interp_cache.get(i)
        if f is None:
            f = PchipInterpolator(self.x, self.N[i], extrapolate=False)
            self._interp_cache[i] = f
        return f

    def _combined_interp(self, i: int) -> PchipInterpolator:
        f = self._combined_cache.get(i)
        if f is None:
            xf = np.concatenate([self.x, self.upper.x[1:]])
            vf = np.concatenate([self.N[i], self.upper.N[i][1:]])
            f = PchipInterpolator(xf, vf, extrapolate=False)
            self._combined_cache[i] = f
        return f

    def lookup(self, t: float, xq, *, combined: bool = False) -> np.ndarray:
        """N at time t (linear between slices) and flow coordinates xq."""
        i, theta = self._index(t)
        pick = self._combined_interp if (combined and self.upper is not None) else self._main_interp
        base = pick(i)(xq)
        if theta == 0.0:
            return base
        return (1.0 - theta) * base + theta * pick(i + 1)(xq)

    # -- serialization -------------------------------------------------------

    def to_csv(self, path) -> None:
        """Rows (t, m, N[, P]) over the main grid, 17 significant digits."""
        n_t, n_m = self.N.shape
        tt = np.repeat(self.times, n_m)
        mm = np.tile(self.m, n_t)
        cols = [tt, mm, self.N.ravel()]
        header = "t,m,N"
        if self.P is not None:
            cols.append(self.P.ravel())
            header += ",P"
        np.savetxt(path, np.column_stack(cols), fmt="%.17g", delimiter=",",
                   header=header, comments="")

    @classmethod
    def from_csv(cls, path) -> "SolutionField":
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        times = np.unique(data[:, 0])
        m = np.unique(data[:, 1])
        n_t, n_m = times.size, m.size
        if n_t * n_m != data.shape[0]:
            raise ConfigurationError("CSV is not a complete time x maturity table")
        N = data[:, 2].reshape(n_t, n_m)
        P = data[:, 3].reshape(n_t, n_m) if data.shape[1] > 3 else None
        return cls(times=times, x=m.copy(), m=m, N=N, P=P)

    def save(self, path_prefix) -> None:
        """Compact binary table plus a JSON sidecar with run metadata."""
        import json
        arrays = {"times": self.times, "x": self.x, "m": self.m, "N": self.N}
        if self.P is not None:
            arrays["P"] = self.P
        if self.upper is not None:
            arrays["upper_x"] = self.upper.x
            arrays["upper_m"] = self.upper.m
            arrays["upper_N"] = self.upper.N
            if self.upper.P is not None:
                arrays["upper_P"] = self.upper.P
        np.savez_compressed(str(path_prefix) + ".npz", **arrays)
        with open(str(path_prefix) + ".meta.json", "w") as fh:
            json.dump(self.metadata, fh, indent=2, sort_keys=True, default=float)

    @classmethod
    def load(cls, path_prefix) -> "SolutionField":
        import json
        import os
        data = np.load(str(path_prefix) + ".npz")
        meta_path = str(path_prefix) + ".meta.json"
        metadata = {}
        if os.path.exists(meta_path):
            with open(meta_path) as fh:
                metadata = json.load(fh)
        upper = None
        if "upper_x" in data:
            upper = UpperBand(x=data["upper_x"], m=data["upper_m"], N=data["upper_N"],
                              P=data["upper_P"] if "upper_P" in data else None)
        return cls(times=data["times"], x=data["x"], m=data["m"], N=data["N"],
                   P=data["P"] if "P" in data else None, upper=upper,
                   metadata=metadata)


# ---------------------------------------------------------------------------
# the solver
# ---------------------------------------------------------------------------

class _RunState:
    """Mutable scratch owned by one solve (windows advance it in place)."""

    def __init__(self):
        self.N = None             # (n_slices, M) main field, filled as we go
        self.band = None          # (n_slices, NB) or None
        self.ring = None          # HistoryField over the active x grid
        self.i = 0                # last finalized slice index
        self.n_slices = 0
        self.phi_tau = None       # interpolant of phi(tau_upper, .)
        self.G_carry = None       # accumulated influx integral at slice i
        self.J_carry = None       # accumulated outflux integral at slice i
        self.dec_r = None         # resting-phase decay table
        self.dec_g = None         # proliferating-phase decay table
        self.zeta_qa = None       # division weights on the age Gauss nodes
        self.K_step = None        # per-node one-step attenuation
        self.alpha_bar = 1.0      # sup of K over one window span
        self.windows: list = []
        self.window_index = 0
        self.tol_picard = 1e-10
        self.n_max = 50


class Solver:
    """Windowed Picard solver bound to one model and grid.

    A single solve is sequential (windows are causally ordered); distinct
    solves from one Solver are independent and may run concurrently.
    """

    def __init__(self, params: ModelParams, grid: Optional[Grid] = None, *,
                 kernels: Optional[Kernels] = None, m_nodes: int = 512,
                 dt_divisor: int = 64):
        self.params = params
        self.kern = kernels if kernels is not None else Kernels(params)
        self.flow = self.kern.flow
        if grid is None:
            grid = Grid.build(self.flow, params.tau_lower, params.tau_upper,
                              m_nodes=m_nodes, dt_divisor=dt_divisor)
        self.grid = grid
        # the contraction bookkeeping needs the Lipschitz constant up front
        self.lipschitz = self.kern.lipschitz_l()

        flow, g = self.flow, params.maturity
        xs = grid.x_nodes
        self._log_gi = flow.log_h(g.inverse(grid.m_nodes))        # ln h(g_inv(m_j))
        a_nodes, a_weights = mapped_rule(params.tau_lower, params.tau_upper, 16)
        self._a_nodes, self._a_weights = a_nodes, a_weights
        self._xdelta = np.exp(self._log_gi[None, :] - a_nodes[:, None])   # (16, M)
        self._mdelta = flow.h_inv_log(self._log_gi[None, :] - a_nodes[:, None])
        self._shift_x = xs * math.exp(-grid.dt)
        # band characteristics: stage maturities fixed per step
        xb = grid.band_x
        self._band_stage_m = tuple(
            np.asarray(flow.h_inv(xb * math.exp(-s))) for s in
            (grid.dt, 0.5 * grid.dt, 0.0))
        self._full_stage_m = tuple(
            np.asarray(flow.h_inv(grid.x_full * math.exp(-s))) for s in
            (grid.dt, 0.5 * grid.dt, 0.0))
        self._tables = None

    # -- attenuation tables ----------------------------------------------------

    def _ensure_tables(self, depth: float):
        """Resting/proliferating decay tables deep enough for ``depth`` of pullback."""
        x1 = self.grid.x_nodes[1]
        lg = self._log_gi[np.isfinite(self._log_gi)]
        u_min = min(math.log(x1), float(np.min(lg))) - depth - 1.0
        if self._tables is None or self._tables[0] > u_min:
            dec_r = self.kern.decay_table("resting", u_min)
            dec_g = self.kern.decay_table("proliferating", u_min)
            self._tables = (u_min, dec_r, dec_g)
        return self._tables[1], self._tables[2]

    def _zeta_matrix(self, dec_g) -> np.ndarray:
        """zeta(m_j, a_q) on the Gauss nodes, with the factor 2 folded in."""
        k_qa = self.params.division.k(self.grid.m_nodes[None, :],
                                      self._a_nodes[:, None], self.flow.g1)
        xi_qa = np.exp(dec_g.log_survival(np.exp(self._log_gi)[None, :],
                                          self._a_nodes[:, None]))
        return 2.0 * k_qa * xi_qa

    # -- direct-form evaluations (reference path) -------------------------------

    def _aligned_index(self, t: float) -> int:
        pos = t / self.grid.dt
        i = round(pos)
        if abs(pos - i) > 1e-6:
            raise DomainError(f"t = {t:.9g} must align with the slice times")
        return i

    def eval_G(self, record, t: float, m: float) -> float:
        """Division influx integral at (t, m), trapezoid in s and 16-node
        Gauss-Legendre in division age, evaluated from scratch."""
        grid = self.grid
        nh = grid.n_history
        it = self._aligned_index(t)
        if it < nh:
            raise DomainError("eval_G needs t >= tau_upper")
        if it == nh:
            return 0.0
        dec_r, dec_g = self._ensure_tables(t + grid.tau_upper)
        log_x = float(self.flow.log_h(m))
        s_idx = np.arange(nh, it + 1)
        svals = s_idx * grid.dt
        w_s = np.full(svals.size, grid.dt)
        w_s[0] = w_s[-1] = 0.5 * grid.dt
        x_m = math.exp(log_x) if np.isfinite(log_x) else 0.0
        total = 0.0
        for sv, ws in zip(svals, w_s):
            ly = log_x - (t - sv)
            y = float(self.flow.h_inv_log(np.asarray(ly)))
            lgy = float(self.flow.log_h(self.flow.maturity.inverse(np.asarray(y))))
            k_q = self.params.division.k(np.full(16, y), self._a_nodes, self.flow.g1)
            xi_q = np.exp(dec_g.log_survival(
                np.full(16, math.exp(lgy) if np.isfinite(lgy) else 0.0), self._a_nodes))
            xd = np.exp(lgy - self._a_nodes) if np.isfinite(lgy) else np.zeros(16)
            md = self.flow.h_inv_log(lgy - self._a_nodes) if np.isfinite(lgy) else np.zeros(16)
            nv = np.array([float(record.lookup(sv - a, np.asarray([xq]))[0])
                           for a, xq in zip(self._a_nodes, xd)])
            inner = float(np.sum(self._a_weights * k_q * xi_q *
                                 self.kern.beta(md, nv) * nv))
            decay = float(dec_r.survival(np.asarray([x_m]), t - sv)[0])
            total += ws * 2.0 * inner * decay
        return total

    def eval_J(self, record, t: float, m: float) -> float:
        """Reintroduction outflux integral at (t, m), trapezoid on slice times."""
        grid = self.grid
        nh = grid.n_history
        it = self._aligned_index(t)
        if it < nh:
            raise DomainError("eval_J needs t >= tau_upper")
        if it == nh:
            return 0.0
        dec_r, _ = self._ensure_tables(t)
        log_x = float(self.flow.log_h(m))
        x_m = math.exp(log_x) if np.isfinite(log_x) else 0.0
        s_idx = np.arange(nh, it + 1)
        svals = s_idx * grid.dt
        w_s = np.full(svals.size, grid.dt)
        w_s[0] = w_s[-1] = 0.5 * grid.dt
        total = 0.0
        for sv, ws in zip(svals, w_s):
            ly = log_x - (t - sv)
            y = float(self.flow.h_inv_log(np.asarray(ly)))
            xq = math.exp(ly) if np.isfinite(ly) else 0.0
            nv = float(record.lookup(sv, np.asarray([xq]))[0])
            decay = float(dec_r.survival(np.asarray([x_m]), t - sv)[0])
            total += ws * decay * float(self.kern.beta(np.asarray(y), np.asarray(nv))) * nv
        return total

    # -- windowed solve ----------------------------------------------------------

    def start(self, history: InitialHistory, T: float, *,
              tol_picard: float = 1e-10, n_max: int = 50) -> _RunState:
        grid = self.grid
        nh = grid.n_history
        if T < grid.tau_upper - 1e-12:
            raise ConfigurationError("horizon T must be at least tau_upper")
        if history.values.shape != (nh + 1, grid.m_nodes.size):
            raise ConfigurationError(
                f"history shape {history.values.shape} does not match the grid "
                f"({nh + 1} slices x {grid.m_nodes.size} nodes)")
        if history.upper is not None and \
                history.upper.shape != (nh + 1, grid.band_m.size):
            raise ConfigurationError(
                f"upper-band history shape {history.upper.shape} does not "
                f"match the grid ({nh + 1} slices x {grid.band_m.size} nodes)")
        n_steps = max(0, math.ceil((T - grid.tau_upper) / grid.dt - 1e-9))

        use_band = history.upper is not None
        x_reach = math.exp(-grid.tau_lower)
        if x_reach > grid.x_nodes[-1] * (1.0 + 1e-12) and not use_band:
            raise ConfigurationError(
                "division ancestry reaches above g(1) (tau_lower below the "
                "crossing time at g(1)); supply history on the upper band")

        st = _RunState()
        st.tol_picard = tol_picard
        st.n_max = n_max
        st.n_slices = nh + n_steps + 1
        st.N = np.empty((st.n_slices, grid.m_nodes.size))
        st.N[:nh + 1] = history.values
        if use_band:
            st.band = np.empty((st.n_slices, grid.band_m.size))
            st.band[:nh + 1] = history.upper
        x_active = grid.x_full if use_band else grid.x_nodes
        st.ring = HistoryField(x_active, grid.dt,
                               capacity=math.ceil(2.0 * grid.tau_upper / grid.dt) + 2)
        for i in range(nh + 1):
            st.ring.append(self._active_row(st, i))
        st.phi_tau = PchipInterpolator(grid.x_nodes, history.values[nh],
                                       extrapolate=False)
        M = grid.m_nodes.size
        st.G_carry = np.zeros(M)
        st.J_carry = np.zeros(M)
        st.i = nh

        depth = n_steps * grid.dt + grid.tau_upper
        dec_r, dec_g = self._ensure_tables(depth)
        st.dec_r, st.dec_g = dec_r, dec_g
        st.zeta_qa = self._zeta_matrix(dec_g)
        st.K_step = dec_r.survival(grid.x_nodes, grid.dt)
        u_probe = np.linspace(0.0, grid.tau_lower, 33)
        st.alpha_bar = max(float(np.max(dec_r.survival(grid.x_nodes, u)))
                           for u in u_probe)
        return st

    def _active_row(self, st: _RunState, i: int) -> np.ndarray:
        if st.band is None:
            return st.N[i]
        return np.concatenate([st.N[i], st.band[i][1:]])

    def _q_slice(self, st: _RunState, index: int) -> np.ndarray:
        """Inner division integral (age quadrature) at slice ``index``."""
        t = index * self.grid.dt
        acc = np.zeros(self.grid.m_nodes.size)
        for q in range(self._a_nodes.size):
            nv = st.ring.lookup(t - self._a_nodes[q], self._xdelta[q])
            acc += (self._a_weights[q] * st.zeta_qa[q]
                    * self.kern.beta(self._mdelta[q], nv) * nv)
        return acc

    def _j_sweep(self, st: _RunState, N_win: np.ndarray, steps: int) -> np.ndarray:
        """Window-local reintroduction integral along characteristics.

        Covers only [t_window_start, t]; the contribution of earlier times
        is transported separately (it is frozen during the iteration).
        """
        grid = self.grid
        half = 0.5 * grid.dt
        m = grid.m_nodes
        w = self.kern.beta(m[None, :], N_win) * N_win
        J = np.empty_like(N_win)
        J[0] = 0.0
        for r in range(1, steps + 1):
            carried = PchipInterpolator(grid.x_nodes, J[r - 1] + half * w[r - 1],
                                        extrapolate=False)(self._shift_x)
            J[r] = st.K_step * carried + half * w[r]
        return J

    def solve_window(self, st: _RunState) -> dict:
        """Advance one method-of-steps window; returns its iteration record."""
        grid = self.grid
        nh, nw = grid.n_history, grid.n_window
        i0 = st.i
        steps = min(nw, st.n_slices - 1 - i0)
        if steps <= 0:
            raise ConfigurationError("no slices left to solve")
        M = grid.m_nodes.size
        half = 0.5 * grid.dt

        # division influx: depends only on finalized history
        Q = np.empty((steps + 1, M))
        for r in range(steps + 1):
            Q[r] = self._q_slice(st, i0 + r)
        G = np.empty((steps + 1, M))
        G[0] = st.G_carry
        for r in range(1, steps + 1):
            carried = PchipInterpolator(grid.x_nodes, G[r - 1] + half * Q[r - 1],
                                        extrapolate=False)(self._shift_x)
            G[r] = st.K_step * carried + half * Q[r]

        # transport of the accumulated past reintroduction integral: frozen
        # during the iteration because it reads only finalized slices
        J_past = np.empty((steps + 1, M))
        J_past[0] = st.J_carry
        for r in range(1, steps + 1):
            carried = PchipInterpolator(grid.x_nodes, J_past[r - 1],
                                        extrapolate=False)(self._shift_x)
            J_past[r] = st.K_step * carried

        # zeroth iterate: transported history term plus influx minus the
        # past outflux; only the window-local outflux remains to iterate
        base = np.empty((steps + 1, M))
        for r in range(steps + 1):
            back = (i0 + r - nh) * grid.dt
            pulled = st.phi_tau(grid.x_nodes * math.exp(-back))
            base[r] = pulled * st.dec_r.survival(grid.x_nodes, back) + G[r] - J_past[r]

        N_win = np.empty((steps + 1, M))
        N_win[0] = st.N[i0]
        N_win[1:] = base[1:]
        M_sup = float(np.max(np.abs(base)))
        deltas = []
        converged = False
        for _ in range(st.n_max):
            J = self._j_sweep(st, N_win, steps)
            new_rows = base[1:] - J[1:]
            delta = float(np.max(np.abs(new_rows - N_win[1:])))
            deltas.append(delta)
            N_win[1:] = new_rows
            scale = max(M_sup, float(np.max(np.abs(new_rows))), 1e-300)
            if delta <= st.tol_picard * scale:
                converged = True
                break
        if not converged:
            raise ConvergenceError(
                f"window {st.window_index} did not converge in {st.n_max} "
                f"Picard iterations (last delta {deltas[-1]:.3e}); "
                "reduce dt or weaken the reintroduction law",
                window_index=st.window_index, last_delta=deltas[-1])

        # refresh J on the converged iterate: carries the running integral
        # forward and measures how tightly the fixed point closed
        J = self._j_sweep(st, N_win, steps)
        junction = float(np.max(np.abs(N_win[steps] - (base[steps] - J[steps]))))

        st.N[i0 + 1:i0 + steps + 1] = N_win[1:]
        if st.band is not None:
            self._advance_band(st, i0, steps)
        for r in range(1, steps + 1):
            st.ring.append(self._active_row(st, i0 + r))
        st.G_carry = G[steps]
        st.J_carry = J_past[steps] + J[steps]
        st.i = i0 + steps

        meta = {
            "index": st.window_index,
            "t_start": i0 * grid.dt,
            "t_end": (i0 + steps) * grid.dt,
            "steps": steps,
            "iterations": len(deltas),
            "deltas": deltas,
            "sup_initial_iterate": M_sup,
            "alpha_bar": st.alpha_bar,
            "junction_mismatch": junction,
        }
        st.windows.append(meta)
        st.window_index += 1
        return meta

    def _advance_band(self, st: _RunState, i0: int, steps: int) -> None:
        """Transport-decay march of the upper band across one window."""
        grid = self.grid
        dt = grid.dt
        xb = grid.band_x
        m_foot, m_mid, m_node = self._band_stage_m
        psi = self.kern.psi_resting
        p_foot, p_mid, p_node = psi(m_foot), psi(m_mid), psi(m_node)
        beta = self.kern.beta
        foot_x = xb * math.exp(-dt)

        def rhs(mv, pv, u):
            return -(pv + beta(mv, u)) * u

        for r in range(1, steps + 1):
            prev = np.concatenate([st.N[i0 + r - 1], st.band[i0 + r - 1][1:]])
            u0 = PchipInterpolator(grid.x_full, prev, extrapolate=False)(foot_x)
            k1 = rhs(m_foot, p_foot, u0)
            k2 = rhs(m_mid, p_mid, u0 + 0.5 * dt * k1)
            k3 = rhs(m_mid, p_mid, u0 + 0.5 * dt * k2)
            k4 = rhs(m_node, p_node, u0 + dt * k3)
            st.band[i0 + r] = u0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def solve(self, history: InitialHistory, T: float, *,
              tol_picard: float = 1e-10, n_max: int = 50) -> SolutionField:
        """Run the method of steps to horizon T and assemble the record."""
        st = self.start(history, T, tol_picard=tol_picard, n_max=n_max)
        while st.i < st.n_slices - 1:
            self.solve_window(st)
        times = np.arange(st.n_slices) * self.grid.dt
        upper = None
        if st.band is not None:
            upper = UpperBand(x=self.grid.band_x.copy(), m=self.grid.band_m.copy(),
                              N=st.band)
        meta = {
            "model_digest": self.params.digest(),
            "grid": self.grid.describe(),
            "horizon": float(times[-1]),
            "tol_picard": tol_picard,
            "n_max": n_max,
            "lipschitz_l": self.lipschitz,
            "alpha_bar": st.alpha_bar,
            "window_length": self.grid.tau_lower,
            "windows": st.windows,
            "max_iterations": max((w["iterations"] for w in st.windows), default=0),
            "max_junction_mismatch": max((w["junction_mismatch"] for w in st.windows),
                                         default=0.0),
        }
        return SolutionField(times=times, x=self.grid.x_nodes.copy(),
                             m=self.grid.m_nodes.copy(), N=st.N, upper=upper,
                             metadata=meta)

    # -- warmup from age densities ------------------------------------------------

    def warmup(self, data: WarmupData, *, check_positive: bool = False) -> InitialHistory:
        """Produce the history phi on [0, tau_upper] from (Gamma, N0).

        Integrates the pre-horizon transport-reaction equations along
        characteristics with classic fourth-order one-step stages; the
        delayed reintroduction feedback appearing after tau_lower reads
        earlier warmup slices, which time marching makes available.
        """
        grid = self.grid
        dt = grid.dt
        nh = grid.n_history
        tau_lo, tau_up = grid.tau_lower, grid.tau_upper
        dec_r, dec_g = self._ensure_tables(2.0 * tau_up)
        flow = self.flow
        g = self.params.maturity
        beta = self.kern.beta
        psi = self.kern.psi_resting
        M = grid.m_nodes.size
        x_full = grid.x_full
        m_full = grid.m_full
        n_full = x_full.size

        stage_m = self._full_stage_m              # maturities at s-offsets dt, dt/2, 0
        stage_psi = tuple(psi(mm) for mm in stage_m)
        # main-node views of the stage maturities, for the source terms
        stage_main = tuple(mm[:M] for mm in stage_m)
        stage_lgi = tuple(flow.log_h(g.inverse(mm)) for mm in stage_main)
        stage_xgi = tuple(np.exp(lg) for lg in stage_lgi)
        z16, w16 = gauss_legendre(16)

        def source(sigma: float, stage: int, record: HistoryField) -> np.ndarray:
            """Division influx at warmup time sigma on main nodes."""
            out = np.zeros(M)
            lgi = stage_lgi[stage]
            mm = stage_main[stage]
            # boundary part: mothers already proliferating at t = 0
            a_lo = max(sigma, tau_lo)
            if a_lo < tau_up - 1e-14:
                half_len = 0.5 * (tau_up - a_lo)
                a_nodes = a_lo + half_len * (z16 + 1.0)
                a_w = half_len * w16
                mothers_now = flow.h_inv_log(lgi - sigma)       # Delta(sigma, m)
                gam = _eval_two_arg(data.Gamma, mothers_now[None, :],
                                    (a_nodes - sigma)[:, None])
                k_qa = self.params.division.k(mm[None, :], a_nodes[:, None], flow.g1)
                xi_now = np.exp(dec_g.log_survival(stage_xgi[stage], sigma))
                out += 2.0 * xi_now * np.einsum("q,qj->j", a_w, k_qa * gam)
            # delayed part: daughters of cells reintroduced after t = 0
            if sigma > tau_lo + 1e-14:
                half_len = 0.5 * (sigma - tau_lo)
                a_nodes = tau_lo + half_len * (z16 + 1.0)
                a_w = half_len * w16
                k_qa = self.params.division.k(mm[None, :], a_nodes[:, None], flow.g1)
                xi_qa = np.exp(dec_g.log_survival(stage_xgi[stage][None, :],
                                                  a_nodes[:, None]))
                acc = np.zeros(M)
                for q in range(16):
                    xq = np.exp(lgi - a_nodes[q])
                    mq = flow.h_inv_log(lgi - a_nodes[q])
                    nv = record.lookup(sigma - a_nodes[q], xq)
                    acc += a_w[q] * k_qa[q] * xi_qa[q] * beta(mq, nv) * nv
                out += 2.0 * acc
            return out

        values = np.empty((nh + 1, n_full))
        n0 = np.asarray(data.N0(m_full), dtype=float)
        values[0] = np.broadcast_to(n0, (n_full,))
        record = HistoryField(x_full, dt, capacity=nh + 2)
        record.append(values[0])
        foot_x = x_full * math.exp(-dt)

        def rhs(stage: int, u: np.ndarray, src_main: np.ndarray) -> np.ndarray:
            mm = stage_m[stage]
            out = -(stage_psi[stage] + beta(mm, u)) * u
            out[:M] += src_main
            return out

        for i in range(1, nh + 1):
            t0 = (i - 1) * dt
            u0 = PchipInterpolator(x_full, values[i - 1], extrapolate=False)(foot_x)
            src0 = source(t0, 0, record)
            src_mid = source(t0 + 0.5 * dt, 1, record)
            src1 = source(t0 + dt, 2, record)
            k1 = rhs(0, u0, src0)
            k2 = rhs(1, u0 + 0.5 * dt * k1, src_mid)
            k3 = rhs(1, u0 + 0.5 * dt * k2, src_mid)
            k4 = rhs(2, u0 + dt * k3, src1)
            values[i] = u0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(values[i])):
                raise ConfigurationError(
                    f"warmup produced non-finite densities at t = {i * dt:.6g}; "
                    "check Gamma and N0")
            record.append(values[i])

        if check_positive and float(np.min(values)) < -1e-12 * max(1.0, float(np.max(np.abs(values)))):
            raise ConfigurationError("warmup produced negative densities")

        times = np.arange(nh + 1) * dt
        return InitialHistory(times=times, values=values[:, :M].copy(),
                              upper=values[:, M - 1:].copy())

    # -- proliferating phase reconstruction ----------------------------------------

    def proliferating(self, field: SolutionField, data: WarmupData) -> SolutionField:
        """Reconstruct P along characteristics and attach it to the field.

        The sink switches regime at tau_upper: before, it drains the initial
        age density reaching the division deadline; after, it drains the
        reintroduction flux delayed by the full proliferation span. Slice
        times at the switch use the early regime.
        """
        grid = self.grid
        dt = grid.dt
        tau_up = grid.tau_upper
        dec_r, dec_g = self._ensure_tables(float(field.times[-1]) + tau_up)
        flow = self.flow
        beta = self.kern.beta
        psi = self.kern.psi_proliferating
        has_band = field.upper is not None
        x_act = np.concatenate([grid.x_nodes, grid.band_x[1:]]) if has_band else grid.x_nodes
        m_act = np.concatenate([grid.m_nodes, grid.band_m[1:]]) if has_band else grid.m_nodes
        n_act = x_act.size
        M = grid.m_nodes.size

        stage_x = tuple(x_act * math.exp(-s) for s in (dt, 0.5 * dt, 0.0))
        stage_m = tuple(np.asarray(flow.h_inv(sx)) for sx in stage_x)
        stage_psi = tuple(psi(mm) for mm in stage_m)
        with np.errstate(divide="ignore"):
            stage_lx = tuple(np.where(sx > 0.0, np.log(np.maximum(sx, 1e-300)), -np.inf)
                             for sx in stage_x)
        stage_xi_up = tuple(np.exp(dec_g.log_survival(sx, tau_up)) for sx in stage_x)
        stage_x_back = tuple(np.exp(lx - tau_up) for lx in stage_lx)
        stage_m_back = tuple(np.asarray(flow.h_inv_log(lx - tau_up)) for lx in stage_lx)

        def n_at(t: float, xq: np.ndarray) -> np.ndarray:
            return field.lookup(t, xq, combined=has_band)

        def sink(sigma: float, stage: int) -> np.ndarray:
            if sigma < tau_up or abs(sigma - tau_up) < _TIME_SNAP:
                age_left = tau_up - sigma
                mothers = flow.h_inv_log(stage_lx[stage] - sigma)
                gam = _eval_two_arg(data.Gamma, mothers, np.asarray(age_left))
                return gam * np.exp(dec_g.log_survival(stage_x[stage], sigma))
            nv = n_at(sigma - tau_up, stage_x_back[stage])
            return stage_xi_up[stage] * beta(stage_m_back[stage], nv) * nv

        def influx(sigma: float, stage: int) -> np.ndarray:
            nv = n_at(sigma, stage_x[stage])
            return beta(stage_m[stage], nv) * nv

        def rhs(stage: int, u, src, drain):
            return -stage_psi[stage] * u + src - drain

        # initial proliferating load: age integral of Gamma
        z, w = gauss_legendre(16)
        edges = np.linspace(0.0, tau_up, 9)
        P0 = np.zeros(n_act)
        for lo, hi in zip(edges[:-1], edges[1:]):
            half = 0.5 * (hi - lo)
            a_nodes = lo + half * (z + 1.0)
            gam = _eval_two_arg(data.Gamma, m_act[None, :], a_nodes[:, None])
            P0 += half * np.einsum("q,qj->j", w, gam)

        n_slices = field.times.size
        P = np.empty((n_slices, n_act))
        P[0] = P0
        foot_x = stage_x[0]
        for i in range(1, n_slices):
            t0 = (i - 1) * dt
            u0 = PchipInterpolator(x_act, P[i - 1], extrapolate=False)(foot_x)
            s0, sm, s1 = (influx(t0, 0), influx(t0 + 0.5 * dt, 1), influx(t0 + dt, 2))
            d0, dm, d1 = (sink(t0, 0), sink(t0 + 0.5 * dt, 1), sink(t0 + dt, 2))
            k1 = rhs(0, u0, s0, d0)
            k2 = rhs(1, u0 + 0.5 * dt * k1, sm, dm)
            k3 = rhs(1, u0 + 0.5 * dt * k2, sm, dm)
            k4 = rhs(2, u0 + dt * k3, s1, d1)
            P[i] = u0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

        field.P = P[:, :M].copy()
        if has_band:
            field.upper.P = P[:, M - 1:].copy()
        field.metadata.setdefault("emit", []).append("P")
        return field

    # -- a-posteriori residual -------------------------------------------------------

    def residual(self, field: SolutionField, t: float, m: float) -> float:
        """Defect of the strong-form balance at an interior grid point.

        Central differences in t and x for the transport side against age
        quadrature of the division influx; a pure diagnostic whose size
        tracks the discretization error.
        """
        grid = self.grid
        dt = grid.dt
        i = self._aligned_index(t)
        if not (grid.n_history < i < field.times.size - 1):
            raise DomainError("residual needs tau_upper + dt <= t <= T - dt")
        j = int(np.argmin(np.abs(grid.m_nodes - m)))
        if abs(grid.m_nodes[j] - m) > 1e-9:
            raise DomainError("residual expects m on a grid node")
        if not (0 < j < grid.m_nodes.size - 1):
            raise DomainError("residual needs an interior maturity node")
        _, dec_g = self._ensure_tables(float(field.times[-1]) + grid.tau_upper)

        mj = grid.m_nodes[j]
        V = self.params.velocity
        dN_dt = (field.N[i + 1, j] - field.N[i - 1, j]) / (2.0 * dt)
        fluxes = V(grid.m_nodes[j - 1:j + 2]) * field.N[i, j - 1:j + 2]
        dx = grid.x_nodes[1] - grid.x_nodes[0]
        dflux_dx = (fluxes[2] - fluxes[0]) / (2.0 * dx)
        dflux_dm = dflux_dx * grid.x_nodes[j] / float(V(np.asarray([mj]))[0])

        nv_here = field.N[i, j]
        decay = -(float(self._delta_at(mj)) + float(self.kern.beta(np.asarray(mj), np.asarray(nv_here)))) * nv_here
        lgi = float(self.flow.log_h(self.params.maturity.inverse(np.asarray(mj))))
        xd = np.exp(lgi - self._a_nodes)
        md = self.flow.h_inv_log(lgi - self._a_nodes)
        k_q = self.params.division.k(np.full(16, mj), self._a_nodes, self.flow.g1)
        xi_q = np.exp(dec_g.log_survival(np.full(16, math.exp(lgi)), self._a_nodes))
        nv = np.array([float(field.lookup(t - a, np.asarray([xq]))[0])
                       for a, xq in zip(self._a_nodes, xd)])
        gain = 2.0 * float(np.sum(self._a_weights * k_q * xi_q *
                                  self.kern.beta(md, nv) * nv))
        return float(dN_dt + dflux_dm - decay - gain)

    def _delta_at(self, m: float) -> float:
        return float(self.params.rates.delta_fn()(np.asarray([m]))[0])

    def residual_stats(self, field: SolutionField, *, n_times: int = 12,
                       n_nodes: int = 24, seed: int = 0) -> dict:
        """Residual magnitudes over a deterministic interior sample."""
        grid = self.grid
        rng = np.random.default_rng(seed)
        lo_i = grid.n_history + 1
        hi_i = field.times.size - 2
        t_idx = np.unique(np.linspace(lo_i, hi_i, n_times, dtype=int))
        j_idx = np.unique(rng.integers(1, grid.m_nodes.size - 1, size=n_nodes))
        vals = [abs(self.residual(field, field.times[i], grid.m_nodes[j]))
                for i in t_idx for j in j_idx]
        vals = np.asarray(vals)
        return {"max": float(vals.max()), "median": float(np.median(vals)),
                "n_samples": int(vals.size)}


# ---------------------------------------------------------------------------
# module-level conveniences
# ---------------------------------------------------------------------------

def solve(params: ModelParams, history: InitialHistory, T: float, *,
          grid: Optional[Grid] = None, m_nodes: int = 512, dt_divisor: int = 64,
          tol_picard: float = 1e-10, n_max: int = 50) -> SolutionField:
    solver = Solver(params, grid, m_nodes=m_nodes, dt_divisor=dt_divisor)
    return solver.solve(history, T, tol_picard=tol_picard, n_max=n_max)


def solve_warmup(params: ModelParams, data: WarmupData, *,
                 grid: Optional[Grid] = None, m_nodes: int = 512,
                 dt_divisor: int = 64, check_positive: bool = False) -> InitialHistory:
    solver = Solver(params, grid, m_nodes=m_nodes, dt_divisor=dt_divisor)
    return solver.warmup(data, check_positive=check_positive)


def solve_proliferating(params: ModelParams, field: SolutionField,
                        data: WarmupData, *, grid: Optional[Grid] = None,
                        m_nodes: int = 512, dt_divisor: int = 64) -> SolutionField:
    solver = Solver(params, grid, m_nodes=m_nodes, dt_divisor=dt_divisor)
    return solver.proliferating(field, data)
