"""Executable checks of the geometric identities and of solved states.

Every check returns a :class:`CheckResult` with its value, tolerance, pass
flag and the region it was evaluated on.  Analytic identities use the core
region ``|x| <= 0.7``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .chart_fields import (OneFormField, ScalarField, SymTensor2Field, build_grid,
                           frame_norm, l2_inner, metric_field, weighted_sup_norm)
from .constraints import (ConstraintState, SourceTensor, metric_of, residual_both,
                          source_S_a, state_to_physical)
from .curvature import MetricField
from .operators import (OperatorContext, background_context, flat_context, gauge_B,
                        gauge_B_a, killing_sym, lichnerowicz_a, trace_a,
                        vector_laplacian)

CORE_RADIUS = 0.7


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    region: str = "core"
    note: str = ""
    sense: str = "max"  # "max": value <= tolerance; "min": value > tolerance

    @property
    def passed(self):
        if not np.isfinite(self.value):
            return False
        if self.sense == "min":
            return bool(self.value > self.tolerance)
        return bool(self.value <= self.tolerance)

    def to_dict(self):
        d = asdict(self)
        d["passed"] = self.passed
        return d


@dataclass
class VerificationSummary:
    checks: dict = field(default_factory=dict)

    def add(self, result: CheckResult):
        self.checks[result.name] = result
        return result

    @property
    def passed(self):
        return all(c.passed for c in self.checks.values())

    def to_dict(self):
        return {"passed": self.passed,
                "checks": {k: v.to_dict() for k, v in self.checks.items()}}


def _core(grid):
    return grid.core(CORE_RADIUS)


def _as_ctx(g):
    if isinstance(g, OperatorContext):
        return g
    if isinstance(g, SymTensor2Field):
        g = MetricField(g)
    return OperatorContext.from_metric(g)


def _sup_frame(arr, rank, grid, region, level):
    f = {0: ScalarField, 1: OneFormField, 2: SymTensor2Field}[rank](grid, arr, level=level)
    return weighted_sup_norm(f, 0.0, region)


# -- identities -------------------------------------------------------------------


def check_constant_scalar(g, tol=1e-4) -> CheckResult:
    """``max |R(g) + n(n-1)|`` over the core region."""
    ctx = _as_ctx(g)
    grid = ctx.grid
    n = grid.n
    value = float(np.max(np.abs(ctx.curv.scalar + n * (n - 1))[_core(grid)]))
    return CheckResult("constant_scalar", value, tol)


def check_einstein(g, tol=1e-4) -> CheckResult:
    """``max |Ric(g) + (n-1) g|_g0`` over the core region."""
    ctx = _as_ctx(g)
    grid = ctx.grid
    E = ctx.curv.ric + (grid.n - 1) * ctx.g
    value = _sup_frame(E, 2, grid, _core(grid), ctx.curv.level)
    return CheckResult("einstein", value, tol)


def check_gauge(g, s=1.5, tol=1e-4) -> CheckResult:
    """Weighted sup norm of ``B_g(g0)`` on the core region."""
    ctx = _as_ctx(g)
    grid = ctx.grid
    B = gauge_B(ctx, metric_field(grid))
    return CheckResult("gauge", weighted_sup_norm(B, s, _core(grid)), tol,
                       note=f"weight s={s}")


def check_trace_free(ctx, S, tol=1e-12, name="trace_S") -> CheckResult:
    """``max |Tr_g S|`` over every node where ``S`` is valid."""
    arr = S.full() if hasattr(S, "full") else S
    tr = trace_a(ctx, arr)
    valid = np.isfinite(tr)
    value = float(np.max(np.abs(tr[valid]))) if valid.any() else float("nan")
    return CheckResult(name, value, tol, region="valid")


def check_S_properties(ctx, T, xi, trace_tol=1e-12, div_tol=1e-4, s=0.0):
    """Trace-freeness of ``S`` and the core norm of ``div_g S``."""
    from .operators import divergence_sym2_a
    grid = ctx.grid
    S, lvl = source_S_a(ctx, T.full(), xi.data)
    tr = check_trace_free(ctx, S, trace_tol)
    d, ld = divergence_sym2_a(ctx, S, lvl)
    value = weighted_sup_norm(OneFormField(grid, d, level=ld), s, _core(grid))
    return tr, CheckResult("div_S", value, div_tol)


def random_smooth_oneform(grid, seed=0, unit=True):
    """Sum of random plane waves, scaled to unit sup frame norm on the core."""
    rng = np.random.default_rng(seed)
    n = grid.n
    K = rng.normal(size=(n, 3, n)) * 1.5
    P = rng.uniform(0, 2 * np.pi, size=(n, 3))
    wb = np.stack([sum(np.sin(np.tensordot(K[c, m], grid.x, axes=1) + P[c, m])
                       for m in range(3)) for c in range(n)])
    w = OneFormField(grid, np.where(grid.support, wb / grid.rho, np.nan))
    if unit:
        w = w.replace(w.data / weighted_sup_norm(w, 0.0, _core(grid)))
    return w


def polynomial_oneform(grid, seed=0):
    """Random quadratic one-form, exactly differentiated by order-4 stencils."""
    rng = np.random.default_rng(seed)
    n = grid.n
    x = grid.x
    terms = [np.ones(grid.shape)] + list(x) + [x[i] * x[j] for i in range(n)
                                               for j in range(i, n)]
    coef = rng.normal(size=(n, len(terms)))
    arr = np.stack([sum(c * t for c, t in zip(coef[a], terms)) for a in range(n)])
    return OneFormField(grid, np.where(grid.support, arr, np.nan))


def gauge_identity_discrepancy(ctx, omega):
    """Core sup frame norm of ``2 B_g(L_g w) - (Lap w - Ric w)``."""
    grid = ctx.grid
    lhs = 2.0 * gauge_B(ctx, killing_sym(ctx, omega)).data
    rhs = vector_laplacian(ctx, omega).data
    return _sup_frame(lhs - rhs, 1, grid, _core(grid), 2)


def check_gauge_identity(ctx, omega=None, seed=0, tol=1e-3) -> CheckResult:
    if omega is None:
        omega = random_smooth_oneform(ctx.grid, seed)
    return CheckResult("gauge_identity", gauge_identity_discrepancy(ctx, omega), tol)


def perturbed_metric(grid, amplitude=0.2, seed=7):
    """``g0 + h`` with ``h`` a sum of random plane waves in physical components."""
    rng = np.random.default_rng(seed)
    n = grid.n
    npk = n * (n + 1) // 2
    K = rng.normal(size=(npk, 2, n))
    P = rng.uniform(0, 6, size=(npk, 2))
    pert = amplitude * np.stack([sum(np.sin(np.tensordot(K[c, m], grid.x, axes=1) + P[c, m])
                                     for m in range(2)) for c in range(npk)])
    return MetricField(SymTensor2Field(grid, metric_field(grid).data + pert))


def bianchi_value(ctx):
    grid = ctx.grid
    B, lvl = gauge_B_a(ctx, ctx.curv.ric, ctx.curv.level)
    return _sup_frame(B, 1, grid, _core(grid), lvl)


def check_bianchi(g, tol=1e-3) -> CheckResult:
    """Core sup frame norm of ``B_g(Ric(g))``."""
    return CheckResult("bianchi", bianchi_value(_as_ctx(g)), tol)


def observed_order(errors, spacings):
    """Least-squares slope of log error against log spacing."""
    e = np.log(np.asarray(errors, float))
    h = np.log(np.asarray(spacings, float))
    return float(np.polyfit(h, e, 1)[0])


# -- decay --------------------------------------------------------------------


@dataclass
class DecayFit:
    exponent: float
    rho: np.ndarray
    values: np.ndarray
    radii: np.ndarray


def radial_profile(f, r_lo=0.0, r_hi=None, shells=None):
    """Angular sup of the frame norm of ``f`` in radial shells one spacing wide.

    Returns ``(radii, rho, values)`` at the maximizing node of each non-empty
    shell, restricted to nodes where ``f`` is valid.
    """
    grid = f.grid
    r = np.sqrt(grid.r2)
    r_hi = grid.r_max if r_hi is None else r_hi
    sel0 = (r >= r_lo) & (r <= r_hi) & grid.level_mask(f.level)
    norms = frame_norm(f).ravel()
    edges = np.arange(r_lo, r_hi + grid.h, grid.h) if shells is None else shells
    rad, rr, vals = [], [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        idx = np.flatnonzero((sel0 & (r >= lo) & (r < hi)).ravel())
        if idx.size == 0:
            continue
        k = idx[np.argmax(norms[idx])]
        rad.append(r.ravel()[k])
        rr.append(grid.rho.ravel()[k])
        vals.append(norms[k])
    return np.array(rad), np.array(rr), np.array(vals)


def decay_fit(f, s_expected=None, noise_floor=1e-13, shells=None) -> DecayFit:
    """Fit ``|f|_g0 ~ rho^p`` on the annulus ``0.5 <= |x| <= r_max - 2 h``.

    Nodes are binned in radial shells one grid spacing wide; each shell
    contributes its largest frame norm (the angular sup) at that node's own
    ``rho``.  ``s_expected`` is carried for reporting only.
    """
    grid = f.grid
    r_hi = grid.r_max - 2 * grid.h
    if r_hi < 0.5:
        raise ValueError("decay-fit annulus is empty at this resolution")
    rad, rr, vals = radial_profile(f, 0.5, r_hi, shells)
    if len(vals) < 2 or np.min(vals) <= noise_floor:
        raise ValueError("field is below the noise floor on the decay-fit annulus")
    slope = np.polyfit(np.log(rr), np.log(vals), 1)[0]
    return DecayFit(float(slope), rr, vals, rad)


def check_decay(h, s_expected, tol=0.3) -> CheckResult:
    fit = decay_fit(h, s_expected)
    return CheckResult("decay_exponent", abs(fit.exponent - s_expected), tol,
                       region="annulus", note=f"fitted exponent {fit.exponent:.6f}")


# -- non-degeneracy ------------------------------------------------------------------


def random_tracefree_compact(ctx, seed, radius=0.6):
    """Smooth trace-free symmetric tensor supported in ``|x| < radius``."""
    grid = ctx.grid
    rng = np.random.default_rng(seed)
    n = grid.n
    bump = np.clip(1.0 - grid.r2 / radius**2, 0.0, None) ** 4
    K = rng.normal(size=(n, n, n)) * 3.0
    P = rng.uniform(0, 2 * np.pi, size=(n, n))
    ub = np.stack([np.stack([np.sin(np.tensordot(K[i, j], grid.x, axes=1) + P[i, j])
                             for j in range(n)]) for i in range(n)])
    ub = 0.5 * (ub + np.swapaxes(ub, 0, 1)) * bump
    u = np.where(grid.support, ub / grid.rho**2, np.nan)
    u = u - trace_a(ctx, u) / n * ctx.g
    return u


def rayleigh_quotient(ctx, u):
    grid = ctx.grid
    n = grid.n
    lich, lvl = lichnerowicz_a(ctx, u, 0)
    Au = SymTensor2Field(grid, lich + 2 * (n - 1) * u, level=lvl)
    U = SymTensor2Field(grid, u, level=lvl)
    return l2_inner(Au, U) / l2_inner(U, U)


def nondegeneracy_probe(ctx, trials=20, seed=0):
    """Smallest Rayleigh quotient of ``Lich + 2(n-1)`` over random trace-free fields.

    Trial ``i`` uses seed ``(seed, i)``, so a larger trial count only adds
    fields and the minimum cannot increase.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    q = [rayleigh_quotient(ctx, random_tracefree_compact(ctx, [seed, i]))
         for i in range(trials)]
    return float(min(q)), q


# -- batteries --------------------------------------------------------------------


def background_battery(grid, tol=1e-4) -> VerificationSummary:
    ctx = background_context(grid)
    out = VerificationSummary()
    out.add(check_constant_scalar(ctx, tol))
    out.add(check_einstein(ctx, tol))
    out.add(check_gauge(ctx, 1.5, tol=1e-5))
    out.add(check_bianchi(ctx, tol))
    rho_bar_err = _defining_function_error(grid)
    out.add(CheckResult("defining_function", rho_bar_err, 1e-12, region="support",
                        note="| |d rho|_gbar - 1 | sampled on |x| = 1 directions"))
    return out


def _defining_function_error(grid, samples=64):
    # gbar = rho^2 g0 = delta on the ball and extends continuously to |x| = 1,
    # where d rho = -x has unit length.  Check gbar at the nodes, then |d rho|
    # along sampled unit directions.
    region = grid.support
    gbar = grid.rho[region] ** 2 * metric_field(grid).full()[:, :, region]
    err = float(np.max(np.abs(gbar - np.eye(grid.n)[:, :, None])))
    rng = np.random.default_rng(0)
    v = rng.normal(size=(samples, grid.n))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    drho = -v
    err = max(err, float(np.max(np.abs(np.sqrt(np.sum(drho**2, axis=1)) - 1.0))))
    return err


def solution_battery(state: ConstraintState, source: SourceTensor, s=1.5,
                     tol_R=5e-4, tol_gauge=1e-4, tol_div=1e-4,
                     decay_tol=0.3, tol_residual=1e-9) -> VerificationSummary:
    """Post-solve battery for a state solving the gauged system with ``source``."""
    grid = state.grid
    ctx = OperatorContext.from_metric(metric_of(state))
    out = VerificationSummary()
    out.add(check_constant_scalar(ctx, tol_R))
    out.add(check_gauge(ctx, s, tol_gauge))
    _, xi = state_to_physical(state)
    tr, dv = check_S_properties(ctx, source.field, xi, div_tol=tol_div)
    out.add(tr)
    out.add(dv)
    gauged, ungauged, _ = residual_both(state, source)
    core = _core(grid)
    out.add(CheckResult("gauged_residual", gauged.weighted_norm(s, grid.interior),
                        tol_residual, region="interior",
                        note="the solved system itself"))
    out.add(CheckResult("ungauged_residual", ungauged.weighted_norm(s, core), tol_gauge,
                        note="extended system without the gauge term"))
    out.add(check_bianchi(ctx))
    h, _ = state_to_physical(state)
    recipe = source.recipe
    if recipe.profile == "rho-power" and recipe.amplitude > 0:
        out.add(check_decay(h, recipe.decay, decay_tol))
    return out
