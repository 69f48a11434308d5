"""Command line driver: configuration files, built-in scenarios, exact-error
evaluation, effectivity reporting and CSV/VTK/JSON export."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from .coupling import (
    ConfigError,
    FixedStressEngine,
    Problem,
    RunConfig,
    RunResult,
    run,
)
from .estimators import EstimatorContext, _blocks, jnl_weights
from .mesh import Mesh, MeshError, load_mesh, structured_square
from .reconstruct import check_mean_value_lemma, clamp_mask
from .spaces import MaterialData

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_IO = 0, 1, 2, 3, 4

BC_KINDS = ("clamped", "drained_free", "sealed_roller")


# ------------------------------------------------------------------ config


@dataclass
class ConfigEntry:
    value: str
    line: int


def parse_config_text(text: str, source: str = "<config>") -> dict[str, ConfigEntry]:
    """``key = value`` lines; ``#`` starts a comment. Duplicate keys are errors."""
    out: dict[str, ConfigEntry] = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{i}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key or not val:
            raise ConfigError(f"{source}:{i}: empty key or value")
        if key in out:
            raise ConfigError(f"{source}:{i}: duplicate key '{key}' (first on line {out[key].line})")
        out[key] = ConfigEntry(val, i)
    return out


def _bool(s: str) -> bool:
    v = s.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s: str):
    return None if s.lower() in ("none", "default", "auto") else float(s)


# run parameters: key -> (converter, RunConfig field)
RUN_KEYS: dict[str, tuple[Callable, str]] = {
    "algorithm": (str, "algorithm"),
    "stopping": (str, "stopping"),
    "epsilon": (float, "epsilon"),
    "gamma_it": (float, "gamma_it"),
    "tau_min": (float, "tau_min"),
    "tau_f": (float, "tau_f"),
    "delta_fm": (int, "delta_fm"),
    "delta": (float, "delta"),
    "beta": (_opt_float, "beta"),
    "balance": (str, "balance"),
    "equilibration": (str, "equilibration"),
    "mech_interpolation": (str, "mech_interpolation"),
    "max_iterations": (int, "max_iterations"),
    "estimator_stride": (int, "estimator_stride"),
    "adapt_iterations": (int, "adapt_iterations"),
    "balance_stride": (int, "balance_stride"),
    "windows": (int, "windows"),
    "estimate": (_bool, "estimate"),
}
BALANCE_KEYS = ("gamma_tm_P", "gamma_tm_U", "Gamma_tm_P", "Gamma_tm_U")
SCENARIO_KEYS: dict[str, Callable] = {
    "scenario": str, "mesh": str, "n": int, "T": float, "c0": float, "alpha": float,
    "mu": float, "lambda": float, "K": float, "length": float, "p_init": float,
    "output": str, "exact_errors": _bool,
}


@dataclass
class AppConfig:
    scenario: str = "manufactured"
    mesh: str | None = None
    n: int = 16
    T: float | None = None
    c0: float | None = None
    alpha: float | None = None
    mu: float | None = None
    lam: float | None = None
    K: float | None = None
    K_by_material: dict = field(default_factory=dict)
    length: float | None = None
    p_init: float | None = None
    bc: dict = field(default_factory=dict)
    output: str = "porofix_out"
    exact_errors: bool = True
    run: RunConfig = field(default_factory=RunConfig)
    base_dir: Path = field(default_factory=Path.cwd)
    lines: dict = field(default_factory=dict)  # key -> line number
    source: str = "<config>"


def config_from_entries(entries: dict[str, ConfigEntry], source: str = "<config>",
                        base_dir: Path | None = None) -> AppConfig:
    cfg = AppConfig(base_dir=Path(base_dir) if base_dir else Path.cwd(), source=source)
    run_kw: dict = {}
    bal = {"gamma_tm_P": 0.8, "gamma_tm_U": 0.8, "Gamma_tm_P": 1.2, "Gamma_tm_U": 1.2}
    for key, ent in entries.items():
        cfg.lines[key] = ent.line
        where = f"{source}:{ent.line}"
        try:
            if key in RUN_KEYS:
                conv, name = RUN_KEYS[key]
                run_kw[name] = conv(ent.value)
            elif key in BALANCE_KEYS:
                bal[key] = float(ent.value)
            elif key in SCENARIO_KEYS:
                v = SCENARIO_KEYS[key](ent.value)
                setattr(cfg, "lam" if key == "lambda" else key, v)
            elif key.startswith("K."):
                cfg.K_by_material[int(key[2:])] = float(ent.value)
            elif key.startswith("bc."):
                if ent.value not in BC_KINDS:
                    raise ValueError(f"boundary kind must be one of {BC_KINDS}")
                cfg.bc[key[3:]] = ent.value
            else:
                raise ConfigError(f"{where}: unknown key '{key}'")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for '{key}': {exc}") from None
    run_kw["gamma_tm"] = (bal["gamma_tm_P"], bal["gamma_tm_U"])
    run_kw["Gamma_tm"] = (bal["Gamma_tm_P"], bal["Gamma_tm_U"])
    try:
        cfg.run = RunConfig(**run_kw)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if cfg.scenario not in SCENARIOS:
        raise ConfigError(f"{source}:{cfg.lines.get('scenario', 0)}: unknown scenario "
                          f"'{cfg.scenario}', expected one of {tuple(SCENARIOS)}")
    if cfg.n < 1:
        raise ConfigError(f"{source}:{cfg.lines['n']}: n must be positive")
    return cfg


def load_config(path: str | Path) -> AppConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror or exc}") from None
    return config_from_entries(parse_config_text(text, str(path)), str(path), path.parent)


# ---------------------------------------------------------------- scenarios


@dataclass
class ExactSolution:
    """Closed forms of the pressure and displacement, (x, y, t) -> arrays."""

    p: Callable
    u: Callable  # -> (2, ...)
    grad_u: Callable  # -> (2, 2, ...), rows are components

    def sigma(self, x, y, t, material: MaterialData):
        G = np.asarray(self.grad_u(x, y, t))
        eps = 0.5 * (G + np.swapaxes(G, 0, 1))
        div = G[0, 0] + G[1, 1]
        eye = np.eye(2).reshape((2, 2) + (1,) * np.ndim(div))
        return 2 * material.mu * eps + (material.lam * div - material.alpha * self.p(x, y, t)) * eye


@dataclass
class Scenario:
    name: str
    mesh: Mesh
    material: MaterialData
    bc: dict  # boundary tag -> kind
    g: Callable | None
    f: Callable | None
    T: float = 1.0
    p0: object = None
    exact: ExactSolution | None = None
    metadata: dict = field(default_factory=dict)

    def problem(self) -> Problem:
        return Problem(self.mesh, self.material, self.T, self.g, self.f, self.p0,
                       *boundary_dofs(self.mesh, self.bc), name=self.name)

    def scaled(self, c: float) -> "Scenario":
        """Same scenario with data and exact solution multiplied by ``c``."""
        def sc(fn):
            return None if fn is None else (lambda x, y, t: c * np.asarray(fn(x, y, t)))
        p0 = self.p0
        if callable(p0):
            p0 = (lambda q: (lambda x, y: c * np.asarray(q(x, y))))(p0)
        elif p0 is not None:
            p0 = c * np.asarray(p0, dtype=float)
        ex = None if self.exact is None else ExactSolution(sc(self.exact.p), sc(self.exact.u),
                                                           sc(self.exact.grad_u))
        return replace(self, g=sc(self.g), f=sc(self.f), p0=p0, exact=ex)


def boundary_dofs(mesh: Mesh, bc: dict):
    """(fixed flux edges, fixed stress dofs, pressure clamp, displacement clamp)."""
    tags = mesh.edge_tag
    bedges = np.flatnonzero(mesh.boundary_edge)
    unknown = sorted({tags[j] for j in bedges} - set(bc))
    if unknown:
        raise ConfigError(f"no boundary condition for tag(s) {unknown}")
    flux, stress, pclamp, uclamp = [], [], [], []
    for j in bedges:
        kind = bc[tags[j]]
        if kind == "clamped":
            pclamp.append(j)
            uclamp.append(j)
        elif kind == "drained_free":
            pclamp.append(j)
            stress.extend(4 * j + np.arange(4))
        elif kind == "sealed_roller":
            flux.append(j)
            n = mesh.edge_normals[j]
            if abs(n[0]) > 1 - 1e-12:
                row = 1  # tangent along y
            elif abs(n[1]) > 1 - 1e-12:
                row = 0
            else:
                raise ConfigError(f"sealed_roller needs axis-aligned boundary edges (edge {j})")
            stress.extend([4 * j + 2 * row, 4 * j + 2 * row + 1])
        else:
            raise ConfigError(f"unknown boundary kind '{kind}'")
    return (np.asarray(flux, dtype=np.int64), np.asarray(stress, dtype=np.int64),
            clamp_mask(mesh, np.asarray(pclamp, dtype=np.int64)),
            clamp_mask(mesh, np.asarray(uclamp, dtype=np.int64)))


def _bump(x, y):
    return x * (1 - x) * y * (1 - y)


def manufactured_exact() -> ExactSolution:
    def grad_u(x, y, t):
        px = t * (1 - 2 * x) * y * (1 - y)
        py = t * x * (1 - x) * (1 - 2 * y)
        return np.array([[px, py], [px, py]])
    return ExactSolution(lambda x, y, t: t * _bump(x, y),
                         lambda x, y, t: np.array([t * _bump(x, y), t * _bump(x, y)]), grad_u)


def manufactured_sources(c0: float, alpha: float, mu: float, lam: float, k: float):
    """Closed-form g and f for p = u_1 = u_2 = t x(1-x) y(1-y) with K = k I."""
    def g(x, y, t):
        px = (1 - 2 * x) * y * (1 - y)
        py = x * (1 - x) * (1 - 2 * y)
        lap = -2 * y * (1 - y) - 2 * x * (1 - x)
        return c0 * _bump(x, y) + alpha * (px + py) - k * t * lap

    def f(x, y, t):
        px = (1 - 2 * x) * y * (1 - y)
        py = x * (1 - x) * (1 - 2 * y)
        pxx, pyy = -2 * y * (1 - y), -2 * x * (1 - x)
        pxy = (1 - 2 * x) * (1 - 2 * y)
        lap = pxx + pyy
        return -t * np.array([mu * lap + (mu + lam) * (pxx + pxy) - alpha * px,
                              mu * lap + (mu + lam) * (pxy + pyy) - alpha * py])
    return g, f


def _builtin_or_file(cfg: AppConfig, default: Callable[[], Mesh]) -> Mesh:
    if cfg.mesh is None or cfg.mesh == "builtin":
        return default()
    path = Path(cfg.mesh)
    if not path.is_absolute():
        path = cfg.base_dir / path
    where = f"{cfg.source}:{cfg.lines.get('mesh', 0)}"
    if not path.exists():
        raise ConfigError(f"{where}: mesh file '{path}' not found")
    try:
        return load_mesh(path)
    except (MeshError, FileNotFoundError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def manufactured_scenario(cfg: AppConfig | None = None) -> Scenario:
    cfg = cfg or AppConfig()
    c0 = 1.0 if cfg.c0 is None else cfg.c0
    alpha = 1.0 if cfg.alpha is None else cfg.alpha
    mu = 1.0 if cfg.mu is None else cfg.mu
    lam = 1.0 if cfg.lam is None else cfg.lam
    k = 1.0 if cfg.K is None else cfg.K
    mesh = _builtin_or_file(cfg, lambda: structured_square(cfg.n))
    mat = MaterialData.uniform(mesh.n_cells, k, c0=c0, alpha=alpha, mu=mu, lam=lam)
    g, f = manufactured_sources(c0, alpha, mu, lam, k)
    bc = {tag: "clamped" for tag in set(mesh.edge_tag[mesh.boundary_edge])}
    bc.update(cfg.bc)
    if cfg.K_by_material:
        raise ConfigError("the manufactured scenario takes one scalar K")
    return Scenario("manufactured", mesh, mat, bc, g, f, 1.0 if cfg.T is None else cfg.T, None,
                    manufactured_exact(), {"c0": c0, "c0_note": "c0 is not given for this test; default 1"})


OSTEON_MATERIAL, MATRIX_MATERIAL = 1, 0


def osteon_mesh(n: int = 32, length: float = 1.0, radius: float = 0.35) -> Mesh:
    """Square with a half osteon at the bottom and quarter osteons in the
    top corners, cut as a staircase of the structured triangulation.

    Top side is tagged ``bc1``, the other sides ``bc2``.
    """
    base = structured_square(n, 0.0, length, 0.0, length)
    c = base.centroids / length
    centres = np.array([[0.5, 0.0], [0.0, 1.0], [1.0, 1.0]])
    d = np.linalg.norm(c[:, None, :] - centres[None], axis=2).min(axis=1)
    mat = np.where(d < radius, OSTEON_MATERIAL, MATRIX_MATERIAL)
    tags = {}
    for (a, b), t in base.boundary_tags().items():
        tags[(a, b)] = "bc1" if t == "top" else "bc2"
    return Mesh(base.vertices, base.cells, mat, tags)


def osteon_scenario(cfg: AppConfig | None = None) -> Scenario:
    cfg = cfg or AppConfig(n=32)
    length = 1.0 if cfg.length is None else cfg.length
    mesh = _builtin_or_file(cfg, lambda: osteon_mesh(cfg.n, length))
    kmap = {OSTEON_MATERIAL: 1e-6, MATRIX_MATERIAL: 1e-7}
    if cfg.K is not None:
        kmap = {m: cfg.K for m in kmap}
    kmap.update(cfg.K_by_material)
    missing = set(np.unique(mesh.cell_material)) - set(kmap)
    if missing:
        raise ConfigError(f"no permeability for material id(s) {sorted(missing)}")
    K = np.array([kmap[int(m)] for m in mesh.cell_material])[:, None, None] * np.eye(2)
    mat = MaterialData(K, c0=0.263 if cfg.c0 is None else cfg.c0,
                       alpha=0.132 if cfg.alpha is None else cfg.alpha,
                       mu=0.328 if cfg.mu is None else cfg.mu,
                       lam=0.25 if cfg.lam is None else cfg.lam)
    bc = {"bc1": "drained_free", "bc2": "sealed_roller"}
    bc.update(cfg.bc)
    p_init = 1.0 if cfg.p_init is None else cfg.p_init
    return Scenario("osteon", mesh, mat, bc, None, None, 15.0 if cfg.T is None else cfg.T,
                    np.full(mesh.n_cells, p_init), None,
                    {"geometry": "approximate osteon layout", "units": "dimensionless coefficients"})


SCENARIOS: dict[str, Callable] = {"manufactured": manufactured_scenario, "osteon": osteon_scenario}


def build_scenario(cfg: AppConfig) -> Scenario:
    return SCENARIOS[cfg.scenario](cfg)


# ------------------------------------------------------ strong-form check


def _d1(fn, h):
    """Fourth-order central difference operator along one argument."""
    return lambda s: (-fn(s + 2 * h) + 8 * fn(s + h) - 8 * fn(s - h) + fn(s - 2 * h)) / (12 * h)


def strong_residuals(sc: Scenario, x: float, y: float, t: float, h: float = 1e-3) -> tuple:
    """Mass and momentum residuals of the exact solution at one point, from
    finite differences of the closed forms (a scalar K is read from cell 0)."""
    ex, mat = sc.exact, sc.material
    k = float(mat.K[0, 0, 0])
    p, u = ex.p, ex.u

    def div_u(xx, yy, tt):
        du0 = _d1(lambda s: u(s, yy, tt)[0], h)(xx)
        du1 = _d1(lambda s: u(xx, s, tt)[1], h)(yy)
        return du0 + du1

    dt_p = _d1(lambda s: p(x, y, s), h)(t)
    dt_div = _d1(lambda s: div_u(x, y, s), h)(t)
    px = lambda xx, yy: _d1(lambda s: p(s, yy, t), h)(xx)
    py = lambda xx, yy: _d1(lambda s: p(xx, s, t), h)(yy)
    lap = _d1(lambda s: px(s, y), h)(x) + _d1(lambda s: py(x, s), h)(y)
    mass = float(sc.g(x, y, t) - (mat.c0 * dt_p + mat.alpha * dt_div - k * lap))

    def sig(xx, yy):
        G = np.empty((2, 2))
        for r in range(2):
            G[r, 0] = _d1(lambda s: u(s, yy, t)[r], h)(xx)
            G[r, 1] = _d1(lambda s: u(xx, s, t)[r], h)(yy)
        eps = 0.5 * (G + G.T)
        return 2 * mat.mu * eps + (mat.lam * np.trace(G) - mat.alpha * p(xx, yy, t)) * np.eye(2)

    div_s = _d1(lambda s: sig(s, y)[:, 0], h)(x) + _d1(lambda s: sig(x, s)[:, 1], h)(y)
    mom = np.asarray(sc.f(x, y, t), dtype=float) + div_s
    return mass, mom


def check_scenario(sc: Scenario, samples: int = 12, seed: int = 0, tol: float = 1e-8) -> float:
    """Largest strong-form residual at random space-time points; raises if
    it exceeds ``tol`` relative to the data scale."""
    if sc.exact is None:
        return 0.0
    rng = np.random.default_rng(seed)
    worst = 0.0
    for x, y, t in rng.uniform([0.05, 0.05, 0.05], [0.95, 0.95, sc.T], size=(samples, 3)):
        m, v = strong_residuals(sc, x, y, t)
        scale = max(1.0, abs(sc.g(x, y, t)), float(np.abs(sc.f(x, y, t)).max()))
        worst = max(worst, abs(m) / scale, float(np.abs(v).max()) / scale)
    if worst > tol:
        raise ConfigError(f"scenario '{sc.name}': sources inconsistent with the exact solution "
                          f"(strong residual {worst:.3e})")
    return worst


# ----------------------------------------------------------- exact errors


def error_terms(samples: list, ctx: EstimatorContext, exact: ExactSolution, material: MaterialData,
                fields: str = "hat") -> dict:
    """Computable part of the energy-type error between the exact solution and
    the conforming reconstructions sampled at the flow nodes.

    ``samples`` are per-node objects with ``t``, ``p_hat`` (M, Q) and
    ``grad_u_hat`` (M, Q, 2, 2); with ``fields="tilde"`` the broken
    post-processed ``p_til``/``grad_u_til`` are used instead. The time
    integrals use the same Gauss points and exponential block weights as the
    estimator aggregation; the negative-norm terms are not computed.
    ``exact`` may also be a list of node samples of a second discrete
    solution on the same time grid, giving the distance between the two.
    """
    X, Y = ctx.x[..., 0], ctx.x[..., 1]
    times = np.array([s.t for s in samples])
    if isinstance(exact, (list, tuple)):
        exact = _sampled_reference(exact, times, fields)
    taus = np.diff(times)
    ep, eu = np.zeros(len(taus)), np.zeros(len(taus))
    mu, lam = material.mu, material.lam
    if fields not in ("hat", "tilde"):
        raise ValueError("fields must be 'hat' or 'tilde'")
    pk, gk = ("p_hat", "grad_u_hat") if fields == "hat" else ("p_til", "grad_u_til")
    for n in range(1, len(samples)):
        s0, s1 = samples[n - 1], samples[n]
        for ts, tw in zip(ctx.ts, ctx.tw):
            t = s0.t + ts * taus[n - 1]
            ph = (1 - ts) * getattr(s0, pk) + ts * getattr(s1, pk)
            gu = (1 - ts) * getattr(s0, gk) + ts * getattr(s1, gk)
            if callable(exact):
                rp, rg = exact(n, ts)
            else:
                rp = exact.p(X, Y, t)
                rg = np.moveaxis(np.asarray(exact.grad_u(X, Y, t)), (0, 1), (-2, -1))
            dp = ph - rp
            G = gu - rg
            eps = 0.5 * (G + np.swapaxes(G, -1, -2))
            div = G[..., 0, 0] + G[..., 1, 1]
            ep[n - 1] += tw * taus[n - 1] * float(np.sum(ctx.wq * dp**2))
            eu[n - 1] += tw * taus[n - 1] * float(np.sum(ctx.wq * (2 * mu * np.sum(eps**2, axis=(-1, -2))
                                                                     + lam * div**2)))
    J = jnl_weights(times)
    p1, p2, p3 = _blocks(np.sqrt(ep), taus, J)
    u1, u2, u3 = _blocks(np.sqrt(eu), taus, J)
    c0 = material.c0
    out = {
        "Q_p": c0 * p1,  # c0 ||p - p_hat||^2 over (0, T)
        "Xi_u": u1,  # 2 mu ||eps||^2 + lambda ||div||^2 over (0, T)
        "Q_p_accum": 2 * c0 * (p2 + p3),
        "Xi_u_accum": u2 + u3,
    }
    sq = 0.5 * (out["Q_p"] + 0.5 * out["Xi_u"]) + out["Q_p_accum"] + out["Xi_u_accum"]
    out["energy_sq"] = sq
    out["energy"] = math.sqrt(max(sq, 0.0))
    out["negative_norms"] = "skipped"
    return out


def _sampled_reference(ref: list, times: np.ndarray, fields: str):
    """Reference fields given as node samples on the same time grid, affine in time."""
    if len(ref) != len(times) or not np.allclose([r.t for r in ref], times, rtol=0, atol=1e-12):
        raise ValueError("reference samples live on a different time grid")
    pk, gk = ("p_hat", "grad_u_hat") if fields == "hat" else ("p_til", "grad_u_til")

    def at(n, s):
        a, b = ref[n - 1], ref[n]
        return ((1 - s) * getattr(a, pk) + s * getattr(b, pk),
                (1 - s) * getattr(a, gk) + s * getattr(b, gk))
    return at


def manufactured_errors(engine: FixedStressEngine, exact: ExactSolution, recs: list | None = None,
                        fields: str = "hat") -> dict:
    """Error terms of the last estimated iterate (or of ``recs``)."""
    recs = recs if recs is not None else engine.last_reconstructions
    if recs is None:
        raise ValueError("no reconstructions available; run the estimators first")
    return error_terms([r.samples for r in recs], engine.ctx, exact, engine.material, fields)


@dataclass
class ReportRow:
    window: int
    k: int
    residual: float
    estimates: dict | None
    error: float | None
    effectivity: float | None
    flow_solves: int
    mech_solves: int
    wall: float


def effectivity_index(rows) -> list:
    """Total estimator over exact error per row; non-finite when either is missing
    or the error vanishes."""
    out = []
    for r in rows:
        est = (r.estimates or {}).get("total") if not isinstance(r, dict) else r.get("total")
        err = r.error if not isinstance(r, dict) else r.get("error")
        if est is None or err is None or not err > 0 or not math.isfinite(err):
            out.append(float("nan"))
        else:
            out.append(float(est) / float(err))
    return out


# ---------------------------------------------------------------- running


@dataclass
class ScenarioRun:
    scenario: Scenario
    config: RunConfig
    engine: FixedStressEngine
    result: RunResult
    rows: list
    final_errors: dict | None


def run_scenario_data(sc: Scenario, config: RunConfig, exact_errors: bool = True) -> ScenarioRun:
    """Run a scenario and collect one report row per iteration."""
    check_scenario(sc)
    cfg = replace(config, keep_breakdowns=True) if config.estimate else config
    engine = FixedStressEngine(sc.problem(), cfg)
    errs: dict = {}
    global_windows = cfg.algorithm == "global" or (cfg.algorithm == "adaptive" and cfg.windows == 1)
    want = exact_errors and sc.exact is not None and cfg.estimate

    def observe(eng, rec, it):
        if want and global_windows and it is not None:
            errs[(rec.window, rec.k)] = manufactured_errors(eng, sc.exact)["energy"]

    engine.observer = observe
    res = run(engine.problem, cfg, engine)
    final = manufactured_errors(engine, sc.exact) if want else None
    rows = [ReportRow(h.window, h.k, h.residual, h.estimates, errs.get((h.window, h.k)), None,
                      h.flow_solves, h.mech_solves, h.wall) for h in res.history]
    for r, e in zip(rows, effectivity_index(rows)):
        r.effectivity = e if math.isfinite(e) else None
    return ScenarioRun(sc, cfg, engine, res, rows, final)


# ----------------------------------------------------------------- export


ESTIMATE_KEYS = ("sp_P", "sp_U", "sp", "tm_P", "tm_U", "tm", "it_P", "it_U", "it", "disc", "total",
                 "eta_NC_P", "eta_NC_U", "bound")
ITERATION_COLUMNS = (("window", "k", "residual") + ESTIMATE_KEYS
                     + ("error", "effectivity", "flow_solves", "mech_solves", "wall"))
INTERVAL_COLUMNS = ("window", "k", "n", "t", "tau", "sp_P", "sp_U", "tm_P", "tm_U", "it_P", "it_U",
                    "eta_P", "eta_U")
GRID_COLUMNS = ("window", "k", "node", "t", "mech")
CELL_FIELDS = ("sp_P", "sp_U", "tm_P", "tm_U", "it_P", "it_U", "R_P", "R_U")


def csv_schema() -> dict:
    return json.loads(resources.files("porofix").joinpath("csv_schema.json").read_text())


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_iterations_csv(rows: list, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ITERATION_COLUMNS)
        for r in rows:
            est = r.estimates or {}
            w.writerow([_fmt(r.window), _fmt(r.k), _fmt(r.residual)]
                       + [_fmt(est.get(k)) for k in ESTIMATE_KEYS]
                       + [_fmt(r.error), _fmt(r.effectivity), _fmt(r.flow_solves),
                          _fmt(r.mech_solves), _fmt(r.wall)])


def write_intervals_csv(history: list, path: Path) -> int:
    """One row per (recorded iteration, flow step); returns the row count."""
    count = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INTERVAL_COLUMNS)
        for h in history:
            bd = h.breakdown
            if bd is None:
                continue
            for n, iv in enumerate(bd.intervals, start=1):
                w.writerow([h.window, h.k, n, _fmt(bd.times[n]), _fmt(iv.tau)]
                           + [_fmt(getattr(iv, c)) for c in INTERVAL_COLUMNS[5:]])
                count += 1
    return count


def write_grid_history(grid_history: list, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GRID_COLUMNS)
        for window, k, grids in grid_history:
            mech = np.zeros(len(grids.flow), dtype=int)
            mech[grids.mech_index] = 1
            for n, t in enumerate(grids.flow):
                w.writerow([window, k, n, _fmt(t), int(mech[n])])


def cell_estimators(result: RunResult) -> dict:
    """Per-cell estimator values of the last flow step of the final breakdown."""
    if result.breakdown is None:
        return {}
    return {k: np.asarray(v) for k, v in result.breakdown.intervals[-1].cells.items()}


def write_vtk(path: Path, mesh: Mesh, cell_data: dict, point_data: dict, title: str = "porofix") -> None:
    """Legacy ASCII unstructured grid; vectors are padded to three components."""
    out = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {mesh.n_vertices} double"]
    out += [f"{x!r} {y!r} 0" for x, y in mesh.vertices.tolist()]
    out.append(f"CELLS {mesh.n_cells} {4 * mesh.n_cells}")
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.cells.tolist()]
    out.append(f"CELL_TYPES {mesh.n_cells}")
    out += ["5"] * mesh.n_cells

    def block(kind, count, data):
        if not data:
            return
        out.append(f"{kind} {count}")
        for name, v in data.items():
            v = np.asarray(v, dtype=float)
            if v.ndim == 1:
                out.append(f"SCALARS {name} double 1")
                out.append("LOOKUP_TABLE default")
                out.extend(repr(float(a)) for a in v)
            else:
                out.append(f"VECTORS {name} double")
                out.extend(f"{float(a)!r} {float(b)!r} 0" for a, b in v)

    block("CELL_DATA", mesh.n_cells, cell_data)
    block("POINT_DATA", mesh.n_vertices, point_data)
    Path(path).write_text("\n".join(out) + "\n")


def read_vtk_cell_scalars(path: Path) -> dict:
    """Reads back the scalar cell arrays written by :func:`write_vtk`."""
    lines = Path(path).read_text().splitlines()
    out, i, in_cells, count = {}, 0, False, 0
    while i < len(lines):
        tok = lines[i].split()
        if tok and tok[0] == "CELL_DATA":
            in_cells, count = True, int(tok[1])
        elif tok and tok[0] == "POINT_DATA":
            in_cells = False
        elif in_cells and tok and tok[0] == "SCALARS":
            out[tok[1]] = np.array([float(v) for v in lines[i + 2:i + 2 + count]])
            i += 1 + count
        i += 1
    return out


def export_fields(run_data: ScenarioRun, fmt: str, path: Path) -> Path:
    """Final-time fields and per-cell estimators as VTK, or the per-step
    estimator table as CSV."""
    path = Path(path)
    res = run_data.result
    if fmt == "csv":
        write_intervals_csv(res.history, path)
        return path
    if fmt != "vtk":
        raise ValueError(f"unknown export format {fmt!r}")
    mesh = run_data.scenario.mesh
    it = res.iterate
    cells = {"p": it.p[-1], "u": it.u[-1].reshape(-1, 2)}
    cells.update({f"eta_{k}": v for k, v in cell_estimators(res).items()})
    points = {}
    recs = run_data.engine.last_reconstructions
    if recs:
        nv = mesh.n_vertices
        points["p_hat"] = recs[-1].p_hat.nodal[:nv]
        points["u_hat"] = recs[-1].u_hat.nodal[:nv]
    write_vtk(path, mesh, cells, points, f"{run_data.scenario.name} t={it.grids.T:g}")
    return path


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def summary(run_data: ScenarioRun) -> dict:
    res, sc = run_data.result, run_data.scenario
    cfg = {f.name: getattr(res.config, f.name) for f in fields(res.config)}
    eff = [r.effectivity for r in run_data.rows if r.effectivity is not None]
    return _jsonable({
        "scenario": sc.name,
        "converged": res.converged,
        "iterations": res.total_iterations,
        "iterations_per_window": list(res.iterations),
        "final_estimates": res.final_estimates,
        "final_errors": run_data.final_errors,
        "final_effectivity": eff[-1] if eff else None,
        "flow_solves": res.flow_solves,
        "mech_solves": res.mech_solves,
        "spacetime_unknowns": res.spacetime_unknowns,
        "solved_unknowns": res.solved_unknowns,
        "tau_min_hits": res.tau_min_hits,
        "beta": res.beta,
        "wall_time": res.wall_time,
        "n_cells": sc.mesh.n_cells,
        "material": {"c0": sc.material.c0, "alpha": sc.material.alpha, "mu": sc.material.mu,
                     "lambda": sc.material.lam},
        "metadata": sc.metadata,
        "config": cfg,
    })


def write_artifacts(run_data: ScenarioRun, outdir: Path) -> dict:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "iterations": outdir / "iterations.csv",
        "intervals": outdir / "intervals.csv",
        "grids": outdir / "grid_history.csv",
        "fields": outdir / "fields.vtk",
        "summary": outdir / "summary.json",
    }
    write_iterations_csv(run_data.rows, paths["iterations"])
    write_intervals_csv(run_data.result.history, paths["intervals"])
    write_grid_history(run_data.result.grid_history, paths["grids"])
    export_fields(run_data, "vtk", paths["fields"])
    paths["summary"].write_text(json.dumps(summary(run_data), indent=2, sort_keys=True) + "\n")
    return paths


def _outdir(cfg: AppConfig, override: str | None) -> Path:
    p = Path(override or cfg.output)
    return p if p.is_absolute() else cfg.base_dir / p


def run_scenario(config_path: str | Path, outdir: str | None = None) -> int:
    try:
        cfg = load_config(config_path)
        sc = build_scenario(cfg)
        data = run_scenario_data(sc, cfg.run, cfg.exact_errors)
    except (ConfigError, MeshError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        paths = write_artifacts(data, _outdir(cfg, outdir))
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    res = data.result
    print(f"{sc.name}: {'converged' if res.converged else 'NOT converged'} after "
          f"{res.total_iterations} iterations; artifacts in {paths['summary'].parent}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


# ----------------------------------------------------------------- verify


def verify_checks(sc: Scenario, config: RunConfig) -> list:
    """(name, passed, detail) for the invariant suite on one scenario."""
    from .postprocess import postprocess_displacement, postprocess_pressure
    from .flow_step import cell_integrals
    from .spaces import stress_divergence_matrix, stress_skew_matrix

    out = []
    try:
        worst = check_scenario(sc)
        out.append(("scenario consistency", True, f"{worst:.2e}"))
    except ConfigError as exc:
        return [("scenario consistency", False, str(exc))]
    cfg = replace(config, estimate=True, stopping="classical", keep_breakdowns=False)
    engine = FixedStressEngine(sc.problem(), cfg)
    res = run(engine.problem, cfg, engine)
    out.append(("convergence", res.converged, f"{res.total_iterations} iterations"))
    it = res.iterate
    fe, mat = engine.fe, engine.material
    mf = it.mech_on_flow(cfg.mech_interpolation)
    n = len(it.grids.flow) - 1
    _, rp = postprocess_pressure(fe, it.w[n], it.p[n], mat, engine.fitter)
    _, ru = postprocess_displacement(fe, mf["sigma"][n], mf["u"][n], mf["zeta"][n], mf["pm"][n], mat,
                                     engine.fitter)
    out.append(("post-processed pressure gradient", rp <= 1e-10 * max(1.0, np.abs(it.w[n]).max()),
                f"{rp:.2e}"))
    out.append(("post-processed displacement gradient", bool(np.isfinite(ru)), f"{ru:.2e} (least squares)"))
    recs = engine.last_reconstructions
    worst = 0.0
    for r0, r1 in zip(recs[:-1], recs[1:]):
        worst = max(worst, float(check_mean_value_lemma(fe, mat.c0, mat.alpha, r1.t - r0.t,
                                                        (r0.p_hat, r1.p_hat), (r0.u_hat, r1.u_hat),
                                                        (r0.p_til, r1.p_til), (r0.u_til, r1.u_til)).max()))
    out.append(("mean-value identity", worst <= 1e-11, f"{worst:.2e}"))
    D, S = stress_divergence_matrix(fe), stress_skew_matrix(fe)
    mom = sym = 0.0
    for r in recs[1:]:
        F = cell_integrals(fe, sc.f, r.t, ncomp=2)
        scale = max(1.0, np.abs(F).max())
        mom = max(mom, float(np.abs((D @ r.sigma_hat).reshape(-1, 2) + F).max()) / scale)
        sym = max(sym, float(np.abs(S @ r.sigma_hat).max()) / scale)
    out.append(("equilibrated momentum balance", mom <= 1e-10, f"{mom:.2e}"))
    out.append(("equilibrated weak symmetry", sym <= 1e-6, f"{sym:.2e}"))
    extra = engine.plain_iteration(it, engine.initial_state())
    rel = max(float(np.abs(extra.p - it.p).max() / max(np.abs(it.p).max(), 1e-300)),
              float(np.abs(extra.sigma - it.sigma).max() / max(np.abs(it.sigma).max(), 1e-300)))
    out.append(("fixed point", rel <= max(10 * cfg.epsilon, 1e-10), f"{rel:.2e}"))
    return out


def verify_scenario(config_path: str | Path) -> int:
    try:
        cfg = load_config(config_path)
        sc = build_scenario(cfg)
    except (ConfigError, MeshError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    checks = verify_checks(sc, cfg.run)
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_VERIFY


# ------------------------------------------------------------------ sweep


def sweep(config_path: str | Path, param: str, values: list, outdir: str | None = None) -> int:
    try:
        cfg = load_config(config_path)
        if param not in RUN_KEYS and param not in BALANCE_KEYS:
            raise ConfigError(f"cannot sweep '{param}'; choose a run parameter")
        sc = build_scenario(cfg)
    except (ConfigError, MeshError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rows = []
    for raw in values:
        try:
            if param in BALANCE_KEYS:
                j = 0 if param.endswith("_P") else 1
                attr = "gamma_tm" if param.startswith("gamma") else "Gamma_tm"
                pair = list(getattr(cfg.run, attr))
                pair[j] = float(raw)
                rc = replace(cfg.run, **{attr: tuple(pair)})
            else:
                conv, name = RUN_KEYS[param]
                rc = replace(cfg.run, **{name: conv(raw)})
        except (ConfigError, ValueError) as exc:
            print(f"config error: {param}={raw}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        data = run_scenario_data(sc, replace(rc, keep_breakdowns=False), exact_errors=False)
        fin = data.result.final_estimates or {}
        rows.append((raw, data.result.total_iterations, data.result.converged, fin.get("total")))
        print(f"{param}={raw}: iterations={rows[-1][1]} converged={rows[-1][2]} total={_fmt(rows[-1][3])}")
    try:
        out = _outdir(cfg, outdir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"sweep_{param}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([param, "iterations", "converged", "total"])
            for v, k, ok, tot in rows:
                w.writerow([v, k, int(ok), _fmt(tot)])
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK if all(r[2] for r in rows) else EXIT_NOT_CONVERGED


# -------------------------------------------------------------------- CLI


def main(argv: list | None = None) -> int:
    ap = argparse.ArgumentParser(prog="porofix", description="Fixed-stress Biot solver with error estimators")
    sub = ap.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a scenario and write the artifacts")
    p_run.add_argument("config")
    p_run.add_argument("-o", "--output", help="output directory (overrides the config)")
    p_ver = sub.add_parser("verify", help="run the invariant checks on a scenario")
    p_ver.add_argument("config")
    p_sw = sub.add_parser("sweep", help="repeat a run over values of one parameter")
    p_sw.add_argument("config")
    p_sw.add_argument("--param", required=True)
    p_sw.add_argument("--values", nargs="+", required=True)
    p_sw.add_argument("-o", "--output")
    args = ap.parse_args(argv)
    if args.command == "run":
        return run_scenario(args.config, args.output)
    if args.command == "verify":
        return verify_scenario(args.config)
    return sweep(args.config, args.param, args.values, args.output)


if __name__ == "__main__":
    sys.exit(main())
