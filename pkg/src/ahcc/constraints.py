"""Gauge-broken extended constraint residual, its linearisation and probes.

Unknowns are stored conformally rescaled, ``hbar = rho^2 h`` and
``xibar = rho xi``, on interior nodes and are exactly zero elsewhere.  The
metric is ``g = g0 + h``.  The residual pair is

    E1 = Ric(g) + (n-1) g - L_g(B_g(g0)) - S,
    E2 = div_g S,
    S  = T - Tr_g(T) g / n + Lo_g xi,

with every operator taken with respect to the current metric ``g``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .chart_fields import (GridError, OneFormField, SymTensor2Field, metric_field,
                           pack_sym, sym_pairs, weighted_sup_norm, zeros)
from .curvature import MetricField, diff_components
from .operators import (OperatorContext, conformal_killing_a, divergence_sym2_a,
                        gauge_B_a, killing_sym_a, lichnerowicz_a, trace_a)

PROFILES = ("rho-power", "gaussian-bump")


class DirichletError(GridError):
    """Unknowns are nonzero on a non-interior node."""


@dataclass(frozen=True)
class SourceRecipe:
    profile: str = "rho-power"
    amplitude: float = 1e-3
    decay: float = 1.5
    seed: int = 0
    width: float = 0.25

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown source profile {self.profile!r}; use one of {PROFILES}")
        if self.amplitude < 0:
            raise ValueError("source amplitude must be >= 0")
        if self.width <= 0:
            raise ValueError("source width must be positive")

    def scaled(self, amplitude):
        return SourceRecipe(self.profile, amplitude, self.decay, self.seed, self.width)

    def to_dict(self):
        return asdict(self)


@dataclass
class SourceTensor:
    field: SymTensor2Field
    recipe: SourceRecipe


@dataclass
class ConstraintState:
    hbar: SymTensor2Field
    xibar: OneFormField

    @classmethod
    def zero(cls, grid):
        return cls(zeros(grid, 2, rescaled=True), zeros(grid, 1, rescaled=True))

    @property
    def grid(self):
        return self.hbar.grid

    def check_dirichlet(self):
        outside = ~self.grid.interior
        for f in (self.hbar, self.xibar):
            if not f.rescaled:
                raise GridError("ConstraintState holds rescaled components")
            if np.any(f.data[:, outside] != 0.0):
                raise DirichletError(
                    f"{type(f).__name__} is nonzero on a collar or exterior node")
        return self

    def h_physical(self):
        grid = self.grid
        return np.where(grid.support, self.hbar.full() / grid.rho**2, np.nan)

    def xi_physical(self):
        grid = self.grid
        return np.where(grid.support, self.xibar.data / grid.rho, np.nan)

    def axpy(self, t, other):
        """``self + t * other`` as a new state."""
        return ConstraintState(
            self.hbar.replace(self.hbar.data + t * other.hbar.data),
            self.xibar.replace(self.xibar.data + t * other.xibar.data))


@dataclass
class ResidualPair:
    E1: SymTensor2Field
    E2: OneFormField

    @property
    def level(self):
        return max(self.E1.level, self.E2.level)

    def weighted_norms(self, s, region=None):
        return (weighted_sup_norm(self.E1, s, region),
                weighted_sup_norm(self.E2, s, region))

    def weighted_norm(self, s, region=None):
        return max(self.weighted_norms(s, region))

    def __sub__(self, other):
        return ResidualPair(self.E1.replace(self.E1.data - other.E1.data),
                            self.E2.replace(self.E2.data - other.E2.data))

    def scale(self, c):
        return ResidualPair(self.E1.replace(c * self.E1.data),
                            self.E2.replace(c * self.E2.data))


# -- source ----------------------------------------------------------------------


def _random_sym(rng, n):
    a = rng.normal(size=(n, n))
    return 0.5 * (a + a.T)


def make_source(recipe: SourceRecipe, grid) -> SourceTensor:
    """Deterministic source tensor ``T`` with frame norm at most ``amplitude``.

    ``rho-power``: ``rho^2 T = eps rho^s_T A(x)`` where ``A`` is a random
    symmetric field depending (away from a small core of radius 0.1) only on
    the direction ``x / |x|``, normalised to unit sup frame norm.
    ``gaussian-bump``: ``rho^2 T = eps exp(-|x - c|^2 / width^2) A0``.
    """
    n = grid.n
    rng = np.random.default_rng(recipe.seed)
    x = grid.x
    A0 = _random_sym(rng, n)
    A0 /= np.linalg.norm(A0)
    if recipe.profile == "rho-power":
        slopes = np.stack([0.25 * _random_sym(rng, n) for _ in range(n)])
        xhat = x / np.sqrt(grid.r2 + 0.1**2)
        A = A0.reshape((n, n) + (1,) * n) + np.einsum("kij,k...->ij...", slopes, xhat)
        profile = grid.rho**recipe.decay
    else:
        centre = rng.uniform(-0.2, 0.2, size=n)
        d2 = np.sum((x - centre.reshape((n,) + (1,) * n)) ** 2, axis=0)
        A = np.broadcast_to(A0.reshape((n, n) + (1,) * n), (n, n) + grid.shape)
        profile = np.exp(-d2 / recipe.width**2)
    frob = np.sqrt(np.sum(A**2, axis=(0, 1)))
    A = A / np.max(frob[grid.support])
    tbar = recipe.amplitude * profile * A
    phys = np.where(grid.support, tbar / grid.rho**2, np.nan)
    return SourceTensor(SymTensor2Field(grid, phys), recipe)


def zero_source(grid):
    return make_source(SourceRecipe(amplitude=0.0), grid)


# -- residual ----------------------------------------------------------------------


def _background_array(grid):
    return metric_field(grid).full()


def metric_of(state: ConstraintState) -> MetricField:
    grid = state.grid
    return MetricField.from_array(grid, _background_array(grid) + state.h_physical())


def source_S_a(ctx, T, xi, level=0):
    """``S = T - Tr_g(T) g / n + Lo xi`` as a full array and its level."""
    trT = trace_a(ctx, T)
    ck, lvl = conformal_killing_a(ctx, xi, level)
    return T - trT / ctx.n * ctx.g + ck, lvl


def source_S(ctx, T: SymTensor2Field, xi: OneFormField) -> SymTensor2Field:
    if T.rescaled or xi.rescaled:
        raise GridError("source_S needs physical fields")
    S, lvl = source_S_a(ctx, T.full(), xi.data, max(T.level, xi.level))
    return SymTensor2Field(ctx.grid, S, level=lvl)


def _residual_parts(state: ConstraintState, source: SourceTensor, check=True):
    if check:
        state.check_dirichlet()
    grid = state.grid
    n = grid.n
    ctx = OperatorContext.from_metric(metric_of(state))
    T = source.field.full()
    S, _ = source_S_a(ctx, T, state.xi_physical())
    E2, l2 = divergence_sym2_a(ctx, S, 1)
    B, lb = gauge_B_a(ctx, _background_array(grid), 0)
    gauge, lg = killing_sym_a(ctx, B, lb)
    base = ctx.curv.ric + (n - 1) * ctx.g - S
    level = max(ctx.curv.level, lg, l2)
    return ctx, base, gauge, E2, S, level


def _pair(grid, E1, E2, level):
    return ResidualPair(SymTensor2Field(grid, E1, level=level),
                        OneFormField(grid, E2, level=level))


def residual_gauged(state: ConstraintState, source: SourceTensor) -> ResidualPair:
    """Residual of the gauge-broken system at ``(h, xi, T)``."""
    ctx, base, gauge, E2, _, level = _residual_parts(state, source)
    return _pair(state.grid, base - gauge, E2, level)


def residual_ungauged(state: ConstraintState, source: SourceTensor) -> ResidualPair:
    """Residual of the original extended system (no gauge-breaking term)."""
    ctx, base, gauge, E2, _, level = _residual_parts(state, source)
    return _pair(state.grid, base, E2, level)


def residual_both(state, source):
    """Gauged residual, ungauged residual and the gauge term ``L_g(B_g(g0))``."""
    ctx, base, gauge, E2, _, level = _residual_parts(state, source)
    grid = state.grid
    return (_pair(grid, base - gauge, E2, level), _pair(grid, base, E2, level),
            SymTensor2Field(grid, gauge, level=level))


# -- linearisation -----------------------------------------------------------------


def linearized_apply_a(bg_ctx, dh, dxi):
    """Full-array form of ``linearized_apply`` (physical components)."""
    n = bg_ctx.n
    lich, l1 = lichnerowicz_a(bg_ctx, dh, 0)
    ck, lc = conformal_killing_a(bg_ctx, dxi, 0)
    row1 = 0.5 * lich + (n - 1) * dh - ck
    row2, l2 = divergence_sym2_a(bg_ctx, ck, lc)
    return row1, row2, max(l1, l2)


def linearized_apply(bg_ctx, dh: SymTensor2Field, dxi: OneFormField) -> ResidualPair:
    """Derivative of the residual in ``(h, xi)`` at the origin, over ``g0``.

    Row 1 is ``1/2 Lich(dh) + (n-1) dh - Lo(dxi)``, row 2 is ``div Lo(dxi)``.
    """
    if dh.rescaled or dxi.rescaled:
        raise GridError("linearized_apply needs physical fields")
    row1, row2, level = linearized_apply_a(bg_ctx, dh.full(), dxi.data)
    return _pair(bg_ctx.grid, row1, row2, level)


def numeric_jacobian_apply(state0: ConstraintState, source: SourceTensor,
                           direction: ConstraintState, t=1e-4) -> ResidualPair:
    """Central-difference directional derivative of ``residual_gauged``."""
    if t <= 0:
        raise ValueError("probe step must be positive")
    plus = residual_gauged(state0.axpy(t, direction), source)
    minus = residual_gauged(state0.axpy(-t, direction), source)
    return (plus - minus).scale(1.0 / (2 * t))


def random_direction(grid, seed=0, radius=0.8) -> ConstraintState:
    """Smooth rescaled perturbation compactly supported in ``|x| < radius``."""
    rng = np.random.default_rng(seed)
    x = grid.x
    r2 = grid.r2
    n = grid.n
    bump = np.where(r2 < radius**2, (1 - r2 / radius**2) ** 4, 0.0)

    def smooth(nc):
        a = rng.normal(size=(nc, 4))
        return np.stack([bump * (c[0] + c[1] * x[0] + c[2] * x[1] * x[-1]
                                 + c[3] * np.sin(2 * x[-1])) for c in a])

    hb = np.where(grid.interior, smooth(n * (n + 1) // 2), 0.0)
    xb = np.where(grid.interior, smooth(n), 0.0)
    return ConstraintState(SymTensor2Field(grid, hb, rescaled=True),
                           OneFormField(grid, xb, rescaled=True))


def linearization_consistency(grid, directions=5, t=1e-4, sweep=(1e-2, 1e-3, 1e-4),
                              s=1.5, seed=0, region=None):
    """Compare the numeric Jacobian at the origin with ``linearized_apply``.

    Returns the worst relative weighted discrepancy over ``directions`` random
    directions at step ``t`` and, for the first direction, the discrepancy at
    each step of ``sweep``.
    """
    from .operators import background_context

    region = grid.core() if region is None else region
    bg = background_context(grid)
    st = ConstraintState.zero(grid)
    src = zero_source(grid)
    rel = []
    tsweep = []
    exact = []
    for k in range(directions):
        d = random_direction(grid, [seed, k])
        dh, dxi = state_to_physical(d)
        lin = linearized_apply(bg, dh, dxi)
        ln = lin.weighted_norm(s, region)
        steps = sorted(set(sweep) | {t}, reverse=True) if k == 0 else [t]
        for tt in steps:
            num = numeric_jacobian_apply(st, src, d, tt)
            e = (num - lin).weighted_norm(s, region) / ln
            if tt == t:
                rel.append(e)
            if k == 0 and tt in sweep:
                tsweep.append((tt, e))
                if not exact:
                    jd = BackgroundJacobian(bg).apply(dh, dxi)
                exact.append((tt, (num - jd).weighted_norm(s, region) / ln))
    return {"max_relative": float(max(rel)), "relative": [float(v) for v in rel],
            "t_sweep": [(float(a), float(b)) for a, b in tsweep],
            "t_sweep_discrete": [(float(a), float(b)) for a, b in exact],
            "t": t, "s": s}


def state_to_physical(state: ConstraintState):
    grid = state.grid
    return (SymTensor2Field(grid, np.nan_to_num(state.h_physical())),
            OneFormField(grid, np.nan_to_num(state.xi_physical())))


# -- packing ------------------------------------------------------------------------


def n_dof(grid):
    n = grid.n
    return grid.n_interior * (n * (n + 1) // 2 + n)


def pack(state: ConstraintState) -> np.ndarray:
    grid = state.grid
    m = grid.interior
    return np.concatenate([state.hbar.data[:, m].ravel(),
                           state.xibar.data[:, m].ravel()])


def unpack(vec, grid) -> ConstraintState:
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (n_dof(grid),):
        raise ValueError(f"expected vector of length {n_dof(grid)}, got {vec.shape}")
    n = grid.n
    nh = n * (n + 1) // 2
    k = grid.n_interior
    m = grid.interior
    hb = np.zeros((nh,) + grid.shape)
    xb = np.zeros((n,) + grid.shape)
    hb[:, m] = vec[: nh * k].reshape(nh, k)
    xb[:, m] = vec[nh * k:].reshape(n, k)
    return ConstraintState(SymTensor2Field(grid, hb, rescaled=True),
                           OneFormField(grid, xb, rescaled=True))


def pack_residual(pair: ResidualPair) -> np.ndarray:
    """Frame-scaled residual components (``rho^2 E1``, ``rho E2``) on interior nodes."""
    grid = pair.E1.grid
    m = grid.interior
    rho = grid.rho[m]
    return np.concatenate([(pair.E1.data[:, m] * rho**2).ravel(),
                           (pair.E2.data[:, m] * rho).ravel()])


def unpack_residual(vec, grid) -> ResidualPair:
    st = unpack(vec, grid)
    rho = np.where(grid.interior, grid.rho, 1.0)
    E1 = np.where(grid.interior, st.hbar.data / rho**2, np.nan)
    E2 = np.where(grid.interior, st.xibar.data / rho, np.nan)
    return ResidualPair(SymTensor2Field(grid, E1, level=2),
                        OneFormField(grid, E2, level=2))


# -- exact discrete derivative at the origin ----------------------------------------


class BackgroundJacobian:
    """Exact derivative of the discrete gauged residual at ``(0, 0, T = 0)``.

    ``linearized_apply`` discretizes the closed-form linearization, which agrees
    with the derivative of the discrete residual on resolved modes but not on
    grid-scale ones.  This class differentiates the residual's own discrete
    pipeline (metric derivative, Christoffels, contracted curvature and the
    gauge term) step by step, so it is the true Jacobian of ``residual_gauged``
    at the origin up to rounding.
    """

    def __init__(self, bg_ctx):
        ctx = bg_ctx
        self.ctx = ctx
        grid = ctx.grid
        self.grid = grid
        n = grid.n
        self.n = n
        g, inv, sq = ctx.g, ctx.ginv, ctx.metric.sqrt_det
        self.g0 = g
        self.up = np.einsum("ka...,ab...,lb...->kl...", inv, g, inv)
        dens = sq * self.up
        self.flux = sum(grid.diff(dens[i], i, 0, weight=n - 2) for i in range(n))
        self.nab = (self.flux / sq
                    + np.einsum("jik...,ik...->j...", ctx.chris.gamma, self.up))
        B, lb = gauge_B_a(ctx, g, 0)
        self.B = B
        self.lowered = np.einsum("kl...,lij...->kij...",
                                 g, ctx.chris.gamma)

    def apply_h_a(self, dh):
        """Row-1 derivative in the direction ``dh`` (full physical array)."""
        ctx, grid, n = self.ctx, self.grid, self.n
        g, inv, sq = ctx.g, ctx.ginv, ctx.metric.sqrt_det
        G = ctx.chris.gamma
        dinv = -np.einsum("ka...,ab...,bl...->kl...", inv, dh, inv)
        dsq = 0.5 * sq * np.einsum("ab...,ab...->...", inv, dh)
        # Christoffels
        packed = pack_sym(dh)
        ddg = np.stack([grid.diff(packed, a, 0, weight=2) for a in range(n)])
        ddg = unpack_sym_axis(ddg, n)
        dlow = 0.5 * (np.einsum("ijl...->lij...", ddg) + np.einsum("jil...->lij...", ddg)
                      - ddg)
        dG = (np.einsum("kl...,lij...->kij...", dinv, self.lowered)
              + np.einsum("kl...,lij...->kij...", inv, dlow))
        dG = 0.5 * (dG + np.swapaxes(dG, 1, 2))
        # contracted curvature: d_a G^a_db - d_d G^a_ab + G^a_ae G^e_db - G^a_de G^e_ab
        div_part = sum(diff_components(dG[a], a, grid, 1, 1) for a in range(n))
        trG = np.einsum("aab...->b...", dG)
        grad_part = np.stack([grid.diff(trG, d, 1, weight=1) for d in range(n)])
        trG0 = np.einsum("aab...->b...", G)
        quad = (np.einsum("e...,edb...->db...", np.einsum("aae...->e...", dG), G)
                + np.einsum("e...,edb...->db...", trG0, dG)
                - np.einsum("ade...,eab...->db...", dG, G)
                - np.einsum("ade...,eab...->db...", G, dG))
        dric = div_part - grad_part + quad
        dric = 0.5 * (dric + np.swapaxes(dric, 0, 1))
        # gauge term L_g(B_g(g0))
        g0 = self.g0
        dup = (np.einsum("ka...,ab...,lb...->kl...", dinv, g0, inv)
               + np.einsum("ka...,ab...,lb...->kl...", inv, g0, dinv))
        ddens = dsq * self.up + sq * dup
        dflux = sum(grid.diff(ddens[i], i, 0, weight=n - 2) for i in range(n))
        dnab = (dflux / sq - self.flux * dsq / sq**2
                + np.einsum("jik...,ik...->j...", dG, self.up)
                + np.einsum("jik...,ik...->j...", G, dup))
        ddiv = -(np.einsum("mj...,j...->m...", dh, self.nab)
                 + np.einsum("mj...,j...->m...", g, dnab))
        dtr = np.einsum("ij...,ij...->...", dinv, g0)
        dB = ddiv + 0.5 * grid.grad(dtr, 0, weight=0)
        dnB = (np.stack([grid.diff(dB, a, 1, weight=1) for a in range(n)])
               - np.einsum("zai...,z...->ai...", dG, self.B)
               - np.einsum("zai...,z...->ai...", G, dB))
        dgauge = 0.5 * (dnB + np.swapaxes(dnB, 0, 1))
        return dric + (n - 1) * dh - dgauge

    def apply(self, dh: SymTensor2Field, dxi: OneFormField) -> ResidualPair:
        if dh.rescaled or dxi.rescaled:
            raise GridError("BackgroundJacobian needs physical fields")
        ck, lc = conformal_killing_a(self.ctx, dxi.data, 0)
        row1 = self.apply_h_a(dh.full()) - ck
        row2, l2 = divergence_sym2_a(self.ctx, ck, lc)
        return _pair(self.grid, row1, row2, max(l2, 2))


def unpack_sym_axis(arr, n):
    """Unpack symmetric storage on axis 1 of a ``(m, npack, ...)`` array."""
    idx = np.zeros((n, n), dtype=int)
    for c, (i, j) in enumerate(sym_pairs(n)):
        idx[i, j] = idx[j, i] = c
    return arr[:, idx]
