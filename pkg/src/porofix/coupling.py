"""Fixed-stress orchestration: global-in-time, multirate with temporal
windows, and adaptive asynchronous time stepping, each with classical or
estimator-based stopping.

One engine covers all three. A window owns a flow grid and a mechanics grid
whose nodes are a subset of the flow nodes; the global algorithm is a single
conforming window, the multirate algorithm runs one window per coarse step,
and the adaptive algorithm rebuilds both grids during its first iterations.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .estimators import (
    EstimatorBreakdown,
    EstimatorContext,
    IntervalData,
    aggregate_components,
    aggregate_total,
    interval_estimates,
    node_samples,
    step_components,
    step_from_samples,
)
from .flow_step import FlowOperator, FlowStepInput, cell_integrals
from .mech_step import MechOperator
from .mesh import Mesh
from .postprocess import P2Fitter, interpolate_mech_to_fine, postprocess_displacement, postprocess_pressure
from .reconstruct import (
    MODES,
    FluxEquilibrator,
    StressEquilibrator,
    clamp_mask,
    conform_displacement,
    conform_pressure,
)
from .saddle_solver import FactorizationCache, pin_dofs
from .spaces import (
    FESpace,
    MaterialData,
    cell_means,
    default_beta,
    flux_divergence_matrix,
    flux_mass_matrix,
    stress_mass_matrix,
)

ALGORITHMS = ("global", "multirate", "adaptive")
STOPPING = ("classical", "adaptive")
BALANCE_VARIANTS = ("component", "max-spatial")
TOO_COARSE, BALANCED, TOO_FINE = "too-coarse", "balanced", "too-fine"


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ inputs


@dataclass
class Problem:
    """Spatial data of one Biot problem; boundary conditions enter through
    the pinned flux/stress dofs and the clamped nodes of the conforming
    reconstructions."""

    mesh: Mesh
    material: MaterialData
    T: float = 1.0
    g: object = None  # g(x, y, t)
    f: object = None  # f(x, y, t) -> (2, ...)
    p0: object = None  # cell values, p0(x, y), or None for zero
    fixed_flux: np.ndarray | None = None  # edges with w.n = 0
    fixed_stress: np.ndarray | None = None  # stress dofs pinned to zero
    p_clamp: np.ndarray | None = None  # P2 nodes where the pressure vanishes
    u_clamp: np.ndarray | None = None  # (nodes, 2) displacement clamps
    name: str = "problem"


@dataclass
class TimeGrids:
    """Flow nodes plus the indices of the flow nodes that are also mechanics nodes."""

    flow: np.ndarray
    mech_index: np.ndarray

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=float)
        self.mech_index = np.asarray(self.mech_index, dtype=np.int64)
        if len(self.flow) < 2 or np.any(np.diff(self.flow) <= 0):
            raise ValueError("flow nodes must be strictly increasing with at least one step")
        idx = self.mech_index
        if len(idx) < 2 or idx[0] != 0 or idx[-1] != len(self.flow) - 1 or np.any(np.diff(idx) <= 0):
            raise ValueError("mechanics nodes must be an increasing subset of the flow nodes"
                             " containing both end points")

    @classmethod
    def uniform(cls, T: float, tau_f: float, delta_fm: int = 1, t0: float = 0.0) -> "TimeGrids":
        n = (T - t0) / tau_f
        N = int(round(n))
        if N < 1 or abs(n - N) > 1e-8 * max(1.0, n):
            raise ValueError(f"time step {tau_f} does not divide the interval length {T - t0}")
        if delta_fm < 1 or N % delta_fm:
            raise ValueError(f"delta_fm={delta_fm} must divide the number of flow steps {N}")
        return cls(t0 + (T - t0) * np.arange(N + 1) / N, np.arange(0, N + 1, delta_fm))

    @classmethod
    def covering(cls, T: float, tau_f: float, delta_fm: int = 1, t0: float = 0.0) -> "TimeGrids":
        """Uniform steps of at most ``tau_f``; the last coarse step may be shorter."""
        N = max(1, int(math.ceil((T - t0) / tau_f - 1e-9)))
        idx = list(range(0, N, max(1, delta_fm))) + [N]
        return cls(t0 + (T - t0) * np.arange(N + 1) / N, idx)

    @property
    def t0(self) -> float:
        return float(self.flow[0])

    @property
    def T(self) -> float:
        return float(self.flow[-1])

    @property
    def n_flow(self) -> int:
        return len(self.flow) - 1

    @property
    def n_mech(self) -> int:
        return len(self.mech_index) - 1

    @property
    def mech(self) -> np.ndarray:
        return self.flow[self.mech_index]

    @property
    def tau_f(self) -> np.ndarray:
        return np.diff(self.flow)

    @property
    def tau_m(self) -> np.ndarray:
        return np.diff(self.mech)

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.mech_index)

    @property
    def conforming(self) -> bool:
        return self.n_mech == self.n_flow

    def window(self, j0: int, j1: int) -> "TimeGrids":
        """Sub-grid between mechanics nodes j0 and j1."""
        a, b = self.mech_index[j0], self.mech_index[j1]
        return TimeGrids(self.flow[a:b + 1], self.mech_index[j0:j1 + 1] - a)

    def same_as(self, other: "TimeGrids") -> bool:
        return (len(self.flow) == len(other.flow) and np.array_equal(self.mech_index, other.mech_index)
                and np.allclose(self.flow, other.flow, rtol=0, atol=1e-14 * max(1.0, abs(self.T))))


@dataclass
class RunConfig:
    algorithm: str = "global"
    stopping: str = "classical"
    epsilon: float = 1e-6
    gamma_it: float = 0.2
    gamma_tm: tuple = (0.8, 0.8)  # (P, U)
    Gamma_tm: tuple = (1.2, 1.2)
    tau_min: float = 1e-4
    tau_f: float = 1.0 / 64
    delta_fm: int = 1
    balance: str = "component"
    equilibration: str = "correction"
    mech_interpolation: str = "affine"
    max_iterations: int = 200
    estimator_stride: int = 3
    delta: float = 2.0
    beta: float | None = None
    adapt_iterations: int = 2
    balance_stride: int = 5
    windows: int = 1  # adaptive: number of equal time windows
    estimate: bool = True
    keep_breakdowns: bool = False

    def __post_init__(self):
        self.gamma_tm = tuple(float(v) for v in np.broadcast_to(self.gamma_tm, (2,)))
        self.Gamma_tm = tuple(float(v) for v in np.broadcast_to(self.Gamma_tm, (2,)))
        self.validate()

    def validate(self):
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.algorithm in ALGORITHMS, f"algorithm must be one of {ALGORITHMS}")
        need(self.stopping in STOPPING, f"stopping must be one of {STOPPING}")
        need(self.balance in BALANCE_VARIANTS, f"balance must be one of {BALANCE_VARIANTS}")
        need(self.equilibration in MODES, f"equilibration must be one of {MODES}")
        need(self.mech_interpolation in ("affine", "literal"), "mech_interpolation must be affine or literal")
        need(0 < self.gamma_it < 1, "gamma_it must lie in (0, 1)")
        for j in range(2):
            need(0 < self.gamma_tm[j] < self.Gamma_tm[j], "need 0 < gamma_tm < Gamma_tm")
        need(self.tau_min > 0, "tau_min must be positive")
        need(self.tau_f > 0, "tau_f must be positive")
        need(self.epsilon > 0, "epsilon must be positive")
        need(int(self.delta_fm) == self.delta_fm and self.delta_fm >= 1, "delta_fm must be a positive integer")
        need(self.max_iterations >= 1, "max_iterations must be at least 1")
        need(self.estimator_stride >= 1, "estimator_stride must be at least 1")
        need(self.balance_stride >= 1, "balance_stride must be at least 1")
        need(self.adapt_iterations >= 0, "adapt_iterations must be nonnegative")
        need(self.windows >= 1, "windows must be at least 1")
        need(self.delta > 0, "delta must be positive")
        need(self.beta is None or self.beta >= 0, "beta must be nonnegative")
        need(self.stopping == "classical" or self.estimate, "adaptive stopping needs the estimators")

    def beta_for(self, material: MaterialData) -> float:
        return float(self.beta) if self.beta is not None else default_beta(material, self.delta)


# ------------------------------------------------------------------ state


def _lerp(times: np.ndarray, values: np.ndarray, t: float) -> np.ndarray:
    """Piecewise-affine evaluation, exact at the nodes."""
    span = times[-1] - times[0]
    tol = 1e-12 * span
    if t < times[0] - tol or t > times[-1] + tol:
        raise ValueError(f"time {t} outside [{times[0]}, {times[-1]}]")
    n = min(int(np.searchsorted(times, t - tol, side="left")), len(times) - 1)
    if abs(times[n] - t) <= tol:
        return values[n]
    n = max(n, 1)
    s = (t - times[n - 1]) / (times[n] - times[n - 1])
    return (1 - s) * values[n - 1] + s * values[n]


@dataclass
class NodeState:
    p: np.ndarray
    w: np.ndarray
    sigma: np.ndarray
    u: np.ndarray
    zeta: np.ndarray


@dataclass
class Iterate:
    """One fixed-stress iterate: flow fields at the flow nodes, mechanics
    fields at the mechanics nodes (node 0 included)."""

    grids: TimeGrids
    p: np.ndarray
    w: np.ndarray
    sigma: np.ndarray
    u: np.ndarray
    zeta: np.ndarray

    def p_at(self, t: float) -> np.ndarray:
        return _lerp(self.grids.flow, self.p, t)

    def sigma_at(self, t: float) -> np.ndarray:
        return _lerp(self.grids.mech, self.sigma, t)

    def mech_at(self, t: float) -> tuple:
        """(sigma, u, zeta, mechanics-node pressure) interpolated affinely."""
        tm = self.grids.mech
        pm = self.p[self.grids.mech_index]
        return (_lerp(tm, self.sigma, t), _lerp(tm, self.u, t), _lerp(tm, self.zeta, t), _lerp(tm, pm, t))

    def end_state(self) -> NodeState:
        return NodeState(self.p[-1], self.w[-1], self.sigma[-1], self.u[-1], self.zeta[-1])

    def mech_on_flow(self, mode: str = "affine") -> dict:
        """Mechanics fields, and the pressure they were computed from, at every flow node."""
        g = self.grids
        tf, idx = g.flow, g.mech_index
        fields = {"sigma": self.sigma, "u": self.u, "zeta": self.zeta, "pm": self.p[idx]}
        out = {k: np.empty((len(tf),) + v.shape[1:]) for k, v in fields.items()}
        for j in range(g.n_mech):
            a, b = idx[j], idx[j + 1]
            fr = (tf[a + 1:b] - tf[a]) / (tf[b] - tf[a])
            for k, v in fields.items():
                out[k][a] = v[j]
                out[k][b] = v[j + 1]
                if b - a > 1:
                    out[k][a + 1:b] = interpolate_mech_to_fine(v[j], v[j + 1], b - a, mode, fr)
        return out


def concatenate_iterates(parts: list) -> Iterate:
    flow = [parts[0].grids.flow]
    idx = [parts[0].grids.mech_index]
    arrays = {k: [getattr(parts[0], k)] for k in ("p", "w", "sigma", "u", "zeta")}
    offset = parts[0].grids.n_flow
    for it in parts[1:]:
        flow.append(it.grids.flow[1:])
        idx.append(it.grids.mech_index[1:] + offset)
        offset += it.grids.n_flow
        for k in arrays:
            arrays[k].append(getattr(it, k)[1:])
    grids = TimeGrids(np.concatenate(flow), np.concatenate(idx))
    return Iterate(grids, **{k: np.concatenate(v) for k, v in arrays.items()})


# ---------------------------------------------------------- stopping rules


class FieldNorms:
    """Squared L2 norms of P0 pressures and stresses."""

    def __init__(self, fe: FESpace):
        self.areas = fe.mesh.areas
        self.Ms = stress_mass_matrix(fe)

    def p2(self, p: np.ndarray) -> np.ndarray:
        return np.atleast_2d(p) ** 2 @ self.areas

    def s2(self, s: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(s)
        return np.einsum("ni,ni->n", s, (self.Ms @ s.T).T)


def classical_residual(current: Iterate, previous: Iterate, norms: FieldNorms) -> float:
    """Relative change of (sigma, p) over the non-initial nodes of a window.

    On a conforming grid spanning [0, T] this is the global criterion; on a
    single coarse step it is the windowed multirate criterion (coarse stress
    node plus every fine pressure node). Grids differing between the two
    iterates give infinity, which forces continuation.
    """
    if not current.grids.same_as(previous.grids):
        return math.inf
    num = norms.p2(current.p[1:] - previous.p[1:]).sum() + norms.s2(current.sigma[1:] - previous.sigma[1:]).sum()
    den = norms.p2(previous.p[1:]).sum() + norms.s2(previous.sigma[1:]).sum()
    if not den >= 1e-300:
        return math.inf
    return float(np.sqrt(num / den))


def classical_residual_global(current: Iterate, previous: Iterate, norms: FieldNorms) -> float:
    if not current.grids.conforming:
        raise ValueError("the global criterion needs equal flow and mechanics grids")
    return classical_residual(current, previous, norms)


def classical_residual_window(current: Iterate, previous: Iterate, norms: FieldNorms) -> float:
    return classical_residual(current, previous, norms)


def stop_rule(eta_it: float, eta_sp: float, eta_tm: float, gamma_it: float) -> bool:
    return eta_it <= gamma_it * max(eta_sp, eta_tm)


def window_sums(breakdown: EstimatorBreakdown, window: slice | None = None) -> dict:
    ivs = breakdown.intervals[window] if window is not None else breakdown.intervals
    return {a: float(sum(getattr(iv, f"{a}_P") + getattr(iv, f"{a}_U") for iv in ivs))
            for a in ("sp", "tm", "it")}


def adaptive_stop_check(breakdown, gamma_it: float, windowed: bool = False,
                        window: slice | None = None) -> bool:
    """Stop when the coupling estimator is a fraction of the larger of the
    spatial and temporal ones. Global form uses the aggregated components;
    the windowed form sums the per-step values over the window."""
    if isinstance(breakdown, dict):
        comp = breakdown
    elif windowed:
        comp = window_sums(breakdown, window)
    else:
        comp = aggregate_components(breakdown)
    return stop_rule(comp["it"], comp["sp"], comp["tm"], gamma_it)


def balance_check(sp: dict, tm: dict, gamma: tuple, Gamma: tuple, variant: str = "component") -> dict:
    """Verdict per J in (P, U) comparing temporal with spatial estimators."""
    if variant not in BALANCE_VARIANTS:
        raise ValueError(f"unknown balance variant {variant!r}")
    out = {}
    for j, J in enumerate(("P", "U")):
        if J not in tm:
            continue
        ref = sp[J] if variant == "component" else max(sp["P"], sp["U"])
        if tm[J] < gamma[j] * ref:
            out[J] = TOO_FINE
        elif tm[J] > Gamma[j] * ref:
            out[J] = TOO_COARSE
        else:
            out[J] = BALANCED
    return out


# ------------------------------------------------------------------ output


@dataclass
class IterationRecord:
    window: int
    k: int
    residual: float
    estimates: dict | None
    window_estimates: dict | None
    flow_solves: int
    mech_solves: int
    wall: float
    breakdown: EstimatorBreakdown | None = None


@dataclass
class RunResult:
    iterate: Iterate
    converged: bool
    iterations: list  # per window
    history: list  # IterationRecord
    grid_history: list  # (window, k, TimeGrids)
    breakdown: EstimatorBreakdown | None
    final_estimates: dict | None
    wall_time: float
    flow_solves: int
    mech_solves: int
    solved_unknowns: int
    spacetime_unknowns: int
    tau_min_hits: int = 0
    beta: float = 0.0
    config: RunConfig | None = None

    @property
    def total_iterations(self) -> int:
        return int(sum(self.iterations))


# ------------------------------------------------------------------ engine


@dataclass
class NodeReconstruction:
    t: float
    p_til: np.ndarray
    u_til: np.ndarray
    p_hat: object
    u_hat: object
    content: np.ndarray  # (c0 p_hat + alpha div u_hat, 1)_K
    sigma: np.ndarray
    sigma_hat: np.ndarray
    w: np.ndarray
    g_int: np.ndarray
    samples: object = None


class FixedStressEngine:
    def __init__(self, problem: Problem, config: RunConfig):
        self.problem, self.config = problem, config
        mesh = problem.mesh
        self.fe = fe = FESpace(mesh)
        self.material = mat = problem.material
        self.beta = config.beta_for(mat)
        self.cache = FactorizationCache()
        self.flow = FlowOperator(fe, mat, self.beta, problem.fixed_flux, self.cache)
        self.mech = MechOperator(fe, mat, problem.fixed_stress, self.cache)
        self.norms = FieldNorms(fe)
        self.p_clamp = problem.p_clamp if problem.p_clamp is not None else clamp_mask(mesh)
        self.u_clamp = problem.u_clamp if problem.u_clamp is not None else clamp_mask(mesh)
        self._ctx = None
        self._fitter = None
        self._eq = None
        self.flow_solves = 0
        self.mech_solves = 0
        self.solved_unknowns = 0
        self.tau_min_hits = 0
        self.observer = None  # called as observer(engine, record, iterate) after each iteration
        self.last_reconstructions = None
        lay = fe.layout
        self.flow_size = lay.n_flux + lay.n_pressure
        self.mech_size = lay.n_stress + lay.n_displacement + lay.n_rotation

    # lazily built estimation machinery
    @property
    def ctx(self) -> EstimatorContext:
        if self._ctx is None:
            self._ctx = EstimatorContext(self.fe, self.material)
        return self._ctx

    @property
    def fitter(self) -> P2Fitter:
        if self._fitter is None:
            self._fitter = P2Fitter(self.fe)
        return self._fitter

    @property
    def equilibrators(self):
        if self._eq is None:
            mode = self.config.equilibration
            self._eq = (FluxEquilibrator(self.fe, mode, self.problem.fixed_flux),
                        StressEquilibrator(self.fe, mode, self.problem.fixed_stress))
        return self._eq

    # ---- initial data
    def initial_pressure(self) -> np.ndarray:
        p0 = self.problem.p0
        M = self.problem.mesh.n_cells
        if p0 is None:
            return np.zeros(M)
        if callable(p0):
            return cell_means(self.fe, p0)
        p0 = np.asarray(p0, dtype=float)
        if p0.shape != (M,):
            raise ValueError("initial pressure must have one value per cell")
        return p0.copy()

    def initial_state(self) -> NodeState:
        p0 = self.initial_pressure()
        fixed = np.asarray(self.problem.fixed_flux if self.problem.fixed_flux is not None else [], dtype=np.int64)
        Mk = pin_dofs(flux_mass_matrix(self.fe, self.material.K_inv), fixed)
        b = flux_divergence_matrix(self.fe).T @ p0
        b[fixed] = 0.0
        w0 = spla.spsolve(Mk.tocsc(), b) if np.any(b) else np.zeros(len(b))
        saved = (self.mech_solves, self.solved_unknowns)
        s, u, z = self._mech_solve([p0], [0.0])
        self.mech_solves, self.solved_unknowns = saved
        return NodeState(p0, np.asarray(w0), s[0], u[0], z[0])

    # ---- solves
    def _flow_step(self, t0: float, t1: float, p_prev: np.ndarray, lag: Iterate):
        tau = t1 - t0
        rate = (lag.sigma_at(t1) - lag.sigma_at(t0)) / tau
        inp = FlowStepInput(p_prev, lag.p_at(t1), lag.p_at(t0), rate, self.problem.g, t1, tau, self.beta)
        self.flow_solves += 1
        self.solved_unknowns += self.flow_size
        return self.flow.step(inp)

    def _mech_solve(self, pressures, times):
        self.mech_solves += len(times)
        self.solved_unknowns += self.mech_size * len(times)
        return self.mech.sweep(np.asarray(pressures), self.problem.f, list(times))

    def flow_sweep(self, times: np.ndarray, start: NodeState, lag: Iterate):
        N = len(times) - 1
        P = np.empty((N + 1, len(start.p)))
        W = np.empty((N + 1, len(start.w)))
        P[0], W[0] = start.p, start.w
        for n in range(1, N + 1):
            W[n], P[n] = self._flow_step(times[n - 1], times[n], P[n - 1], lag)
        return P, W

    def mech_sweep(self, grids: TimeGrids, P: np.ndarray, start: NodeState):
        idx = grids.mech_index
        s, u, z = self._mech_solve(P[idx[1:]], grids.flow[idx[1:]])
        return (np.vstack([start.sigma[None], s]), np.vstack([start.u[None], u]),
                np.vstack([start.zeta[None], z]))

    def constant_lag(self, grids: TimeGrids, start: NodeState) -> Iterate:
        """Initial iterate: the start pressure at every node and the stress
        solving the mechanics with that pressure at every mechanics node."""
        n = len(grids.flow)
        P = np.repeat(start.p[None], n, axis=0)
        W = np.repeat(start.w[None], n, axis=0)
        idx = grids.mech_index
        saved = (self.mech_solves, self.solved_unknowns)
        s, u, z = self._mech_solve(P[idx[1:]], grids.flow[idx[1:]])
        self.mech_solves, self.solved_unknowns = saved  # the initial guess is not an iteration cost
        return Iterate(grids, P, W, np.vstack([start.sigma[None], s]), np.vstack([start.u[None], u]),
                       np.vstack([start.zeta[None], z]))

    def plain_iteration(self, lag: Iterate, start: NodeState) -> Iterate:
        g = lag.grids
        P, W = self.flow_sweep(g.flow, start, lag)
        S, U, Z = self.mech_sweep(g, P, start)
        return Iterate(g, P, W, S, U, Z)

    # ---- reconstructions
    def node_reconstruction(self, t: float, p, w, sigma, u, zeta, pm) -> NodeReconstruction:
        fe, mat = self.fe, self.material
        p_til, _ = postprocess_pressure(fe, w, p, mat, self.fitter)
        u_til, _ = postprocess_displacement(fe, sigma, u, zeta, pm, mat, self.fitter)
        p_hat = conform_pressure(fe, p_til, self.p_clamp)
        u_hat = conform_displacement(fe, u_til, self.u_clamp)
        F = cell_integrals(fe, self.problem.f, t, ncomp=2)
        sigma_hat = self.equilibrators[1](sigma, F)
        samples = node_samples(self.ctx, t, p_hat, u_hat, p_til, u_til, w, sigma, sigma_hat,
                               self.problem.g, self.problem.f)
        gu = samples.grad_u_hat
        div_int = np.einsum("mq,mq->m", self.ctx.wq, gu[..., 0, 0] + gu[..., 1, 1])
        content = mat.c0 * fe.mesh.areas * p_hat.means() + mat.alpha * div_int
        return NodeReconstruction(t, p_til, u_til, p_hat, u_hat, content, sigma, sigma_hat, w,
                                  cell_integrals(fe, self.problem.g, t), samples)

    def reconstructions(self, it: Iterate) -> list:
        mf = it.mech_on_flow(self.config.mech_interpolation)
        return [self.node_reconstruction(t, it.p[n], it.w[n], mf["sigma"][n], mf["u"][n], mf["zeta"][n],
                                         mf["pm"][n]) for n, t in enumerate(it.grids.flow)]

    def equilibrated_flux(self, r0: NodeReconstruction, r1: NodeReconstruction) -> np.ndarray:
        R = r1.g_int - (r1.content - r0.content) / (r1.t - r0.t)
        return self.equilibrators[0](r1.w, R)

    def interval_data(self, r0: NodeReconstruction, r1: NodeReconstruction) -> IntervalData:
        return IntervalData(r1.t - r0.t, r1.t, r1.w, r1.sigma, self.equilibrated_flux(r0, r1), r1.sigma_hat,
                            (r0.p_hat, r1.p_hat), (r0.u_hat, r1.u_hat), (r0.p_til, r1.p_til),
                            (r0.u_til, r1.u_til), self.problem.g, self.problem.f)

    def _step(self, r0: NodeReconstruction, r1: NodeReconstruction):
        return step_from_samples(self.ctx, r0.samples, r1.samples, self.equilibrated_flux(r0, r1))

    def estimate(self, it: Iterate, recs: list | None = None) -> EstimatorBreakdown:
        recs = recs or self.reconstructions(it)
        self.last_reconstructions = recs
        N = len(recs) - 1
        ivs = [interval_estimates(self.ctx, self._step(recs[n - 1], recs[n]), final=(n == N))
               for n in range(1, N + 1)]
        last = ivs[-1].cells
        return EstimatorBreakdown(it.grids.flow.copy(), ivs,
                                  float(np.sqrt(np.sum(last["ncf_P"] ** 2))),
                                  float(np.sqrt(np.sum(last["ncf_U"] ** 2))), self.material.mu)

    def step_components(self, r0: NodeReconstruction, r1: NodeReconstruction) -> dict:
        """Global spatial/temporal/coupling values of one step."""
        return step_components(self.ctx, self._step(r0, r1))

    def verdict(self, comp: dict, which: str) -> str:
        cfg = self.config
        sp = {"P": comp["sp_P"], "U": comp["sp_U"]}
        tm = {which: comp[f"tm_{which}"]}
        return balance_check(sp, tm, cfg.gamma_tm, cfg.Gamma_tm, cfg.balance)[which]

    # ---- adaptive sweeps
    def _lag_reconstruction(self, lag: Iterate, t: float, p, w) -> NodeReconstruction:
        s, u, z, pm = lag.mech_at(t)
        return self.node_reconstruction(t, p, w, s, u, z, pm)

    def adaptive_flow_sweep(self, lag: Iterate, start: NodeState):
        cfg = self.config
        t0, T = lag.grids.t0, lag.grids.T
        snap = 1e-9 * (T - t0)
        times, P, W = [t0], [start.p], [start.w]
        tau = float(lag.grids.tau_f[0])
        rec_prev = self._lag_reconstruction(lag, t0, start.p, start.w)
        step = 0
        while times[-1] < T - snap:
            t = times[-1]
            tau = min(tau, T - t)
            if T - (t + tau) < snap:
                tau = T - t
            check = step % cfg.balance_stride == 0
            direction, fallback = 0, None
            for _ in range(64):
                w, p = self._flow_step(t, t + tau, P[-1], lag)
                if not check:
                    break
                rec = self._lag_reconstruction(lag, t + tau, p, w)
                v = self.verdict(self.step_components(rec_prev, rec), "P")
                if v == BALANCED:
                    break
                if v == TOO_COARSE:
                    if direction > 0:
                        tau, w, p = fallback
                        break
                    if tau / 2 < cfg.tau_min:
                        self.tau_min_hits += 1
                        break
                    tau, direction = tau / 2, -1
                else:
                    if direction < 0:
                        break
                    grown = min(1.5 * tau, T - t)
                    if T - (t + grown) < snap or grown <= tau * (1 + 1e-12):
                        grown = T - t
                    if grown <= tau * (1 + 1e-12):
                        break
                    fallback = (tau, w, p)
                    tau, direction = grown, 1
            times.append(t + tau if T - (t + tau) >= snap else T)
            P.append(p)
            W.append(w)
            rec_prev = self._lag_reconstruction(lag, times[-1], p, w)
            step += 1
        return np.array(times), np.array(P), np.array(W)

    def adaptive_mech_sweep(self, times, P, W, start: NodeState, delta0: int):
        cfg = self.config
        N = len(times) - 1
        idx, S, U, Z = [0], [start.sigma], [start.u], [start.zeta]

        def rec_at(n, s, u, z):
            return self.node_reconstruction(times[n], P[n], W[n], s, u, z, P[n])

        rec_prev = rec_at(0, start.sigma, start.u, start.zeta)
        delta, step, j = max(1, int(delta0)), 0, 0
        while j < N:
            d = min(delta, N - j)
            check = step % cfg.balance_stride == 0
            direction, fallback = 0, None
            for _ in range(64):
                s, u, z = (a[0] for a in self._mech_solve([P[j + d]], [times[j + d]]))
                if not check:
                    break
                rec = rec_at(j + d, s, u, z)
                v = self.verdict(self.step_components(rec_prev, rec), "U")
                if v == BALANCED:
                    break
                if v == TOO_COARSE:
                    if direction > 0:
                        d, s, u, z = fallback
                        break
                    if d == 1:
                        break
                    d, direction = max(1, d // 2), -1
                else:
                    if direction < 0:
                        break
                    nd = min(max(d + 1, int(math.ceil(1.5 * d))), N - j)
                    if nd == d:
                        break
                    fallback = (d, s, u, z)
                    d, direction = nd, 1
            j += d
            idx.append(j)
            S.append(s)
            U.append(u)
            Z.append(z)
            rec_prev = rec_at(j, s, u, z)
            delta = d
            step += 1
        return np.array(idx), np.array(S), np.array(U), np.array(Z)

    def adaptive_iteration(self, lag: Iterate, start: NodeState) -> Iterate:
        times, P, W = self.adaptive_flow_sweep(lag, start)
        idx, S, U, Z = self.adaptive_mech_sweep(times, P, W, start, int(lag.grids.deltas[0]))
        return Iterate(TimeGrids(times, idx), P, W, S, U, Z)

    # ---- window driver
    def run_window(self, grids: TimeGrids, start: NodeState, window: int, adapt: bool,
                   windowed_stop: bool, records: list, grid_history: list):
        cfg = self.config
        lag = self.constant_lag(grids, start)
        grid_history.append((window, 0, grids))
        clock = time.perf_counter()
        for k in range(1, cfg.max_iterations + 1):
            if adapt and k <= cfg.adapt_iterations:
                it = self.adaptive_iteration(lag, start)
                if not it.grids.same_as(lag.grids):
                    grid_history.append((window, k, it.grids))
            else:
                it = self.plain_iteration(lag, start)
            res = classical_residual(it, lag, self.norms)
            est = west = bd = None
            due = cfg.estimate and (k % cfg.estimator_stride == 0 or (adapt and k <= cfg.adapt_iterations))
            if due:
                bd = self.estimate(it)
                est = summarize(bd)
                west = window_sums(bd)
            if cfg.stopping == "classical":
                stop = res < cfg.epsilon
            else:
                stop = bd is not None and adaptive_stop_check(bd if not windowed_stop else west,
                                                              cfg.gamma_it)
            rec = IterationRecord(window, k, res, est, west, self.flow_solves, self.mech_solves,
                                  time.perf_counter() - clock, bd if cfg.keep_breakdowns else None)
            records.append(rec)
            if self.observer is not None:
                self.observer(self, rec, it if due else None)
            lag = it
            if stop:
                return it, k, True
        return lag, cfg.max_iterations, False


def summarize(bd: EstimatorBreakdown) -> dict:
    tot = aggregate_total(bd)
    comp = aggregate_components(bd, tot)
    out = {k: float(v) for k, v in comp.items()}
    out.update({k: float(v) for k, v in tot.items() if k != "total"})
    out["bound"] = float(tot["total"])
    return out


def spacetime_unknowns(grids: TimeGrids, engine: FixedStressEngine) -> int:
    return int(grids.n_flow * engine.flow_size + grids.n_mech * engine.mech_size)


def _finish(engine: FixedStressEngine, parts: list, iterations: list, converged: bool, records: list,
            grid_history: list, clock: float) -> RunResult:
    full = concatenate_iterates(parts)
    bd = fin = None
    if engine.config.estimate:
        bd = engine.estimate(full)
        fin = summarize(bd)
    return RunResult(full, converged, iterations, records, grid_history, bd, fin,
                     time.perf_counter() - clock, engine.flow_solves, engine.mech_solves,
                     engine.solved_unknowns, spacetime_unknowns(full.grids, engine),
                     engine.tau_min_hits, engine.beta, engine.config)


def run_global_in_time(problem: Problem, config: RunConfig, engine: FixedStressEngine | None = None) -> RunResult:
    """Whole-interval flow sweep, then whole-interval mechanics sweep, per iteration."""
    clock = time.perf_counter()
    engine = engine or FixedStressEngine(problem, config)
    grids = TimeGrids.uniform(problem.T, config.tau_f, 1)
    records, gh = [], []
    it, k, ok = engine.run_window(grids, engine.initial_state(), 0, False, False, records, gh)
    return _finish(engine, [it], [k], ok, records, gh, clock)


def run_multirate(problem: Problem, config: RunConfig, engine: FixedStressEngine | None = None) -> RunResult:
    """One window per coarse mechanics step with delta_fm flow substeps."""
    clock = time.perf_counter()
    engine = engine or FixedStressEngine(problem, config)
    grids = TimeGrids.uniform(problem.T, config.tau_f, int(config.delta_fm))
    start = engine.initial_state()
    records, gh, parts, iters = [], [], [], []
    converged = True
    for j in range(grids.n_mech):
        it, k, ok = engine.run_window(grids.window(j, j + 1), start, j, False, True, records, gh)
        parts.append(it)
        iters.append(k)
        converged &= ok
        start = it.end_state()
    return _finish(engine, parts, iters, converged, records, gh, clock)


def run_adaptive(problem: Problem, config: RunConfig, engine: FixedStressEngine | None = None) -> RunResult:
    """Asynchronous time-step adaptation in the first iterations, estimator-based
    stopping, optionally over consecutive equal time windows."""
    clock = time.perf_counter()
    engine = engine or FixedStressEngine(problem, config)
    start = engine.initial_state()
    edges = np.linspace(0.0, problem.T, config.windows + 1)
    records, gh, parts, iters = [], [], [], []
    converged = True
    for j in range(config.windows):
        grids = TimeGrids.covering(edges[j + 1], config.tau_f, int(config.delta_fm), t0=edges[j])
        it, k, ok = engine.run_window(grids, start, j, True, False, records, gh)
        parts.append(it)
        iters.append(k)
        converged &= ok
        start = it.end_state()
    return _finish(engine, parts, iters, converged, records, gh, clock)


def run(problem: Problem, config: RunConfig, engine: FixedStressEngine | None = None) -> RunResult:
    return {"global": run_global_in_time, "multirate": run_multirate,
            "adaptive": run_adaptive}[config.algorithm](problem, config, engine)
