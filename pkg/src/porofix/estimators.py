"""A posteriori estimators: local residual, flux and nonconformity terms,
their split into spatial, temporal and coupling components, and the global
aggregation with exponential time weights."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .reconstruct import ConformingField
from .spaces import RULE_DEG6, FESpace, MaterialData, TriangleRule, gauss_interval

POINCARE_CONVEX = 1.0 / np.pi


class EstimatorContext:
    """Basis tables at the estimator quadrature points for one mesh."""

    def __init__(self, fe: FESpace, material: MaterialData, rule: TriangleRule = RULE_DEG6,
                 time_points: int = 3):
        self.fe, self.material, self.rule = fe, material, rule
        m = fe.mesh
        self.x = fe.points(rule.bary)
        self.wq = fe.weights(rule)
        self.h = m.diameters
        self.cK = material.c_K
        self.N = fe.p2_shape(rule.bary)
        self.G = fe.p2_grads(rule.bary)
        self.b = fe.bubble(rule.bary)
        self.gb = fe.bubble_grads(rule.bary)
        self.RT = fe.rt0_values(rule.bary)
        M, Q = self.wq.shape
        self.SV = fe.stress_values(rule.bary).reshape(M, Q, 12, 4)
        self.rt_div = fe.rt0_div()
        self.s_div = fe.stress_div()
        self.ts, self.tw = gauss_interval(time_points)

    # field evaluation at quadrature points
    def _nodal_val(self, nodes):
        if nodes.ndim == 2:
            return nodes @ self.N.T
        return np.matmul(self.N[None], nodes)

    def _nodal_grad(self, nodes):
        if nodes.ndim == 2:
            return np.matmul(nodes[:, None, None, :], self.G)[:, :, 0, :]
        return np.matmul(np.swapaxes(nodes, 1, 2)[:, None], self.G)

    def p2_val(self, f) -> np.ndarray:
        if isinstance(f, ConformingField):
            b = f.bubble[:, None] if f.bubble.ndim == 1 else f.bubble[:, None, :]
            bq = self.b[None, :] if f.bubble.ndim == 1 else self.b[None, :, None]
            return self._nodal_val(f.cell_nodes(self.fe)) + bq * b
        return self._nodal_val(np.asarray(f))

    def p2_grad(self, f) -> np.ndarray:
        if isinstance(f, ConformingField):
            g = self._nodal_grad(f.cell_nodes(self.fe))
            if f.bubble.ndim == 1:
                return g + self.gb * f.bubble[:, None, None]
            return g + f.bubble[:, None, :, None] * self.gb[:, :, None, :]
        return self._nodal_grad(np.asarray(f))

    def flux(self, w) -> np.ndarray:
        c = np.asarray(w)[self.fe.layout.cell_edges]
        return np.matmul(c[:, None, None, :], self.RT)[:, :, 0, :]

    def stress(self, s) -> np.ndarray:
        c = np.asarray(s)[self.fe.layout.cell_stress]
        M, Q = self.wq.shape
        return np.matmul(c[:, None, None, :], self.SV).reshape(M, Q, 2, 2)

    def div_flux(self, w) -> np.ndarray:
        return np.einsum("mi,mi->m", self.rt_div, np.asarray(w)[self.fe.layout.cell_edges])

    def div_stress(self, s) -> np.ndarray:
        return np.einsum("mid,mi->md", self.s_div, np.asarray(s)[self.fe.layout.cell_stress])

    def sample(self, func, t: float) -> np.ndarray:
        """Callable f(x, y, t) at quadrature points; vector-valued results
        come back as (M, Q, c)."""
        if func is None:
            return np.zeros(self.wq.shape)
        v = np.asarray(func(self.x[..., 0], self.x[..., 1], t), dtype=float)
        if v.ndim == 3:
            return np.moveaxis(v, 0, -1)
        return np.broadcast_to(v, self.wq.shape)

    # norms per cell
    def l2(self, v) -> np.ndarray:
        v = np.asarray(v)
        sq = v**2
        while sq.ndim > 2:
            sq = sq.sum(axis=-1)
        return np.sqrt(np.maximum(np.einsum("mq,mq->m", self.wq, sq), 0.0))

    def star(self, v) -> np.ndarray:
        """||K^{-1/2} v||_K for vector samples (M, Q, 2)."""
        q = (np.matmul(v, self.material.K_inv) * v).sum(-1)
        return np.sqrt(np.maximum(np.einsum("mq,mq->m", self.wq, q), 0.0))

    def energy(self, grad) -> np.ndarray:
        """||K^{1/2} grad||_K."""
        q = (np.matmul(grad, self.material.K) * grad).sum(-1)
        return np.sqrt(np.maximum(np.einsum("mq,mq->m", self.wq, q), 0.0))

    def stress_from(self, p: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
        """2 mu eps(u) + lambda div(u) I - alpha p I from samples."""
        mat = self.material
        eps = 0.5 * (grad_u + np.swapaxes(grad_u, -1, -2))
        div = grad_u[..., 0, 0] + grad_u[..., 1, 1]
        return 2 * mat.mu * eps + ((mat.lam * div - mat.alpha * p)[..., None, None]) * np.eye(2)

    def total_stress(self, p, u) -> np.ndarray:
        return self.stress_from(self.p2_val(p), self.p2_grad(u))


@dataclass
class NodeSamples:
    """Every field of one time node evaluated once at the quadrature points."""

    t: float
    p_hat: np.ndarray  # (M, Q)
    grad_p_hat: np.ndarray  # (M, Q, 2)
    grad_u_hat: np.ndarray  # (M, Q, 2, 2)
    stress_hat: np.ndarray  # total stress of (p_hat, u_hat)
    p_til: np.ndarray
    grad_u_til: np.ndarray
    w_h: np.ndarray  # (M, Q, 2)
    sigma_h: np.ndarray  # (M, Q, 2, 2)
    sigma_hat: np.ndarray
    div_sigma_hat: np.ndarray  # (M, 2)
    g: np.ndarray  # (M, Q)
    f: np.ndarray  # (M, Q, 2)


def node_samples(ctx: EstimatorContext, t: float, p_hat, u_hat, p_til, u_til, w_h, sigma_h, sigma_hat,
                 g=None, f=None) -> NodeSamples:
    ph = ctx.p2_val(p_hat)
    gu = ctx.p2_grad(u_hat)
    fq = ctx.sample(f, t) if f is not None else np.zeros(ctx.wq.shape + (2,))
    return NodeSamples(
        t, ph, ctx.p2_grad(p_hat), gu, ctx.stress_from(ph, gu), ctx.p2_val(p_til), ctx.p2_grad(u_til),
        ctx.flux(w_h), ctx.stress(sigma_h), ctx.stress(sigma_hat), ctx.div_stress(sigma_hat),
        np.asarray(ctx.sample(g, t)), fq,
    )


@dataclass
class IntervalData:
    """Everything the estimators need on one flow interval."""

    tau: float
    t: float  # end time of the interval
    w_h: np.ndarray
    sigma_h: np.ndarray
    w_hat: np.ndarray
    sigma_hat: np.ndarray
    p_hat: tuple  # (n-1, n) ConformingField
    u_hat: tuple
    p_til: tuple  # (n-1, n) broken nodal arrays
    u_til: tuple
    g: object = None  # callable g(x, y, t)
    f: object = None  # callable f(x, y, t) -> (2, ...)

    def samples(self, ctx: EstimatorContext) -> tuple:
        t0 = self.t - self.tau
        s0 = node_samples(ctx, t0, self.p_hat[0], self.u_hat[0], self.p_til[0], self.u_til[0],
                          self.w_h, self.sigma_h, self.sigma_hat, self.g, self.f)
        s1 = node_samples(ctx, self.t, self.p_hat[1], self.u_hat[1], self.p_til[1], self.u_til[1],
                          self.w_h, self.sigma_h, self.sigma_hat, self.g, self.f)
        return s0, s1


@dataclass
class IntervalEstimate:
    tau: float
    eta_P: float
    eta_U: float
    nc1_P: float
    nc1_U: float
    nc2_P: float
    nc2_U: float
    sp_P: float
    sp_U: float
    tm_P: float
    tm_U: float
    it_P: float
    it_U: float
    cells: dict = field(default_factory=dict)  # per-cell values for export


@dataclass
class _Step:
    """Interval view on two node samples plus the interval's equilibrated flux."""

    tau: float
    s0: NodeSamples
    s1: NodeSamples
    w_hat: np.ndarray  # (M, Q, 2)
    div_w_hat: np.ndarray  # (M,)


def _step(ctx: EstimatorContext, d: IntervalData) -> _Step:
    s0, s1 = d.samples(ctx)
    return _Step(d.tau, s0, s1, ctx.flux(d.w_hat), ctx.div_flux(d.w_hat))


def step_from_samples(ctx: EstimatorContext, s0: NodeSamples, s1: NodeSamples, w_hat) -> _Step:
    return _Step(s1.t - s0.t, s0, s1, ctx.flux(w_hat), ctx.div_flux(w_hat))


def _residuals(ctx: EstimatorContext, st: _Step):
    mat = ctx.material
    s0, s1 = st.s0, st.s1
    div = lambda G: G[..., 0, 0] + G[..., 1, 1]
    dphi = (mat.c0 * (s1.p_hat - s0.p_hat) + mat.alpha * (div(s1.grad_u_hat) - div(s0.grad_u_hat))) / st.tau
    rP = s1.g - dphi - st.div_w_hat[:, None]
    etaRP = POINCARE_CONVEX * ctx.h / np.sqrt(ctx.cK) * ctx.l2(rP)
    rU = s1.div_sigma_hat[:, None, :] + s1.f
    etaRU = POINCARE_CONVEX * ctx.h * ctx.l2(rU)
    return etaRP, etaRU


def _fluxes(ctx: EstimatorContext, st: _Step):
    K = ctx.material.K
    s0, s1 = st.s0, st.s1
    FP, FU = [], []
    for s in ctx.ts:
        gp = (1 - s) * s0.grad_p_hat + s * s1.grad_p_hat
        S = (1 - s) * s0.stress_hat + s * s1.stress_hat
        FP.append(ctx.star(st.w_hat + np.matmul(gp, K)))
        FU.append(ctx.l2(s1.sigma_hat - S))
    return np.array(FP), np.array(FU)


def _nonconformity(ctx: EstimatorContext, st: _Step, final: bool):
    mat = ctx.material
    s0, s1 = st.s0, st.s1
    dp0, dp1 = s0.p_til - s0.p_hat, s1.p_til - s1.p_hat
    du0, du1 = s0.grad_u_til - s0.grad_u_hat, s1.grad_u_til - s1.grad_u_hat
    scale = ctx.h / np.sqrt(ctx.cK)
    nc1P, nc1U = [], []
    for s in ctx.ts:
        dp = (1 - s) * dp0 + s * dp1
        du = (1 - s) * du0 + s * du1
        nc1P.append(np.sqrt(mat.c0 / 2) * ctx.l2(dp))
        eps = 0.5 * (du + np.swapaxes(du, -1, -2))
        div = du[..., 0, 0] + du[..., 1, 1]
        nc1U.append(0.5 * np.sqrt(2 * mat.mu * ctx.l2(eps) ** 2 + mat.lam * ctx.l2(div) ** 2))
    div0 = du0[..., 0, 0] + du0[..., 1, 1]
    div1 = du1[..., 0, 0] + du1[..., 1, 1]
    nc2P = mat.c0 * np.sqrt(2) * scale / (3 * np.pi) * np.sqrt(ctx.l2(dp1) ** 2 + ctx.l2(dp0) ** 2)
    nc2U = mat.alpha * np.sqrt(2) * scale / (3 * np.pi) * np.sqrt(ctx.l2(div1) ** 2 + ctx.l2(div0) ** 2)
    out = {"nc1_P": np.array(nc1P), "nc1_U": np.array(nc1U), "nc2_P": nc2P, "nc2_U": nc2U}
    if final:
        out["ncf_P"] = mat.c0 * scale / (2 * np.pi) * ctx.l2(dp1)
        out["ncf_U"] = mat.alpha * scale / (2 * np.pi) * ctx.l2(div1)
    return out


def _components(ctx: EstimatorContext, st: _Step, etaR):
    K = ctx.material.K
    s0, s1 = st.s0, st.s1
    etaRP, etaRU = etaR
    return {
        "sp_P": etaRP + ctx.star(s1.w_h + np.matmul(s1.grad_p_hat, K)),
        "sp_U": etaRU + ctx.l2(s1.sigma_h - s1.stress_hat),
        "tm_P": ctx.energy(s1.grad_p_hat - s0.grad_p_hat),
        "tm_U": ctx.l2(s1.stress_hat - s0.stress_hat),
        "it_P": ctx.star(s1.w_h - st.w_hat),
        "it_U": ctx.l2(s1.sigma_h - s1.sigma_hat),
    }


def residual_estimators(ctx: EstimatorContext, d: IntervalData):
    return _residuals(ctx, _step(ctx, d))


def flux_estimators(ctx: EstimatorContext, d: IntervalData):
    """Samples (Qt, M) of the flux estimators at the in-time Gauss points."""
    return _fluxes(ctx, _step(ctx, d))


def nonconformity_estimators(ctx: EstimatorContext, d: IntervalData, final: bool = False):
    return _nonconformity(ctx, _step(ctx, d), final)


def component_split(ctx: EstimatorContext, d: IntervalData, etaR=None):
    """Per-cell spatial, temporal and coupling estimators."""
    st = _step(ctx, d)
    return _components(ctx, st, etaR if etaR is not None else _residuals(ctx, st))


def step_components(ctx: EstimatorContext, st: _Step) -> dict:
    """Global per-step spatial, temporal and coupling values."""
    comp = _components(ctx, st, _residuals(ctx, st))
    return {k: float(np.sqrt(st.tau * np.sum(v**2))) for k, v in comp.items()}


def interval_estimates(ctx: EstimatorContext, d, final: bool = False) -> IntervalEstimate:
    """Estimators of one interval from IntervalData or a precomputed step."""
    st = d if isinstance(d, _Step) else _step(ctx, d)
    etaR = _residuals(ctx, st)
    FP, FU = _fluxes(ctx, st)
    tw = ctx.tw * st.tau
    eta_P = np.sqrt(np.sum(tw[:, None] * (etaR[0][None, :] + FP) ** 2))
    eta_U = np.sqrt(np.sum(tw[:, None] * (etaR[1][None, :] + FU) ** 2))
    nc = _nonconformity(ctx, st, final)
    comp = _components(ctx, st, etaR)
    glob = {k: float(np.sqrt(st.tau * np.sum(v**2))) for k, v in comp.items()}
    cells = dict(comp)
    cells["R_P"], cells["R_U"] = etaR
    if final:
        cells["ncf_P"], cells["ncf_U"] = nc["ncf_P"], nc["ncf_U"]
    return IntervalEstimate(
        tau=st.tau, eta_P=float(eta_P), eta_U=float(eta_U),
        nc1_P=float(np.sqrt(np.sum(tw[:, None] * nc["nc1_P"] ** 2))),
        nc1_U=float(np.sqrt(np.sum(tw[:, None] * nc["nc1_U"] ** 2))),
        nc2_P=float(np.sqrt(st.tau * np.sum(nc["nc2_P"] ** 2))),
        nc2_U=float(np.sqrt(st.tau * np.sum(nc["nc2_U"] ** 2))),
        cells=cells, **glob,
    )


# ------------------------------------------------------------- aggregation


def jnl_weights(times) -> np.ndarray:
    """Lower-triangular table of double integrals of exp(t - s) over
    I^n x I^l, l <= n, in a form that does not overflow."""
    t = np.asarray(times, dtype=float)
    if np.any(np.diff(t) <= 0):
        raise ValueError("time grid must be strictly increasing")
    tau = np.diff(t)
    a = -np.expm1(-tau)  # 1 - exp(-tau)
    N = len(tau)
    J = np.zeros((N, N))
    for n in range(N):
        J[n, :n + 1] = np.exp(t[n + 1] - t[:n + 1]) * a[n] * a[:n + 1]
    return J


def _blocks(values, taus, J):
    """The three block sums of the global aggregation for per-interval values."""
    sq = np.asarray(values, dtype=float) ** 2
    S = np.cumsum(sq)
    b1 = float(np.sum(sq))
    b2 = float(np.sum(np.asarray(taus) * S))
    b3 = float(np.sum(J @ S)) if len(S) else 0.0
    return b1, b2, b3


@dataclass
class EstimatorBreakdown:
    times: np.ndarray  # flow nodes t^0..t^N
    intervals: list  # IntervalEstimate per interval
    ncf_P: float = 0.0
    ncf_U: float = 0.0
    mu: float = 1.0

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(iv, name) for iv in self.intervals])

    @property
    def taus(self) -> np.ndarray:
        return np.diff(self.times)


def aggregate_total(bd: EstimatorBreakdown) -> dict:
    J = jnl_weights(bd.times)
    taus = bd.taus
    L = {"P": 1.0, "U": 1.0 / bd.mu}
    out = {}
    for c in ("P", "U"):
        b1, b2, b3 = _blocks(bd.series(f"eta_{c}"), taus, J)
        out[f"eta_{c}"] = np.sqrt(L[c] / 2) * np.sqrt(b1 + 2 * b2 + 2 * b3)
        n1 = bd.series(f"nc1_{c}") ** 2
        n2 = bd.series(f"nc2_{c}") ** 2
        _, c2, c3 = _blocks(bd.series(f"nc1_{c}"), taus, J)
        ncf = getattr(bd, f"ncf_{c}")
        out[f"eta_NC_{c}"] = np.sqrt(np.sum(n1) + np.sum(n2) + 4 * c2 + 4 * c3 + ncf**2)
    out["total"] = out["eta_P"] + out["eta_U"] + out["eta_NC_P"] + out["eta_NC_U"]
    return out


def aggregate_components(bd: EstimatorBreakdown, totals: dict | None = None) -> dict:
    totals = totals or aggregate_total(bd)
    J = jnl_weights(bd.times)
    taus = bd.taus
    L = {"P": 1.0, "U": 1.0 / bd.mu}
    out = {}
    for a in ("sp", "tm", "it"):
        for c in ("P", "U"):
            b1, b2, b3 = _blocks(bd.series(f"{a}_{c}"), taus, J)
            v = np.sqrt(L[c] / 2) * (np.sqrt(b1) + np.sqrt(2 * b2) + np.sqrt(2 * b3))
            if a == "sp":
                v += totals[f"eta_NC_{c}"]
            out[f"{a}_{c}"] = float(v)
        out[a] = out[f"{a}_P"] + out[f"{a}_U"]
    out["disc"] = out["sp"] + out["tm"]
    out["total"] = out["sp"] + out["tm"] + out["it"]
    return out
