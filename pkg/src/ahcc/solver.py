"""Linear solves against the background linearisation and the outer nonlinear loop.

The background operator ``L0`` is block triangular in the packed unknowns
``(hbar, xibar)``:

    row 2:  rho   div Lo (xibar / rho)                         = r2
    row 1:  rho^2 A (hbar / rho^2) - rho^2 Lo (xibar / rho)    = r1

so ``xibar`` is solved first and ``hbar`` second.  ``A`` is either the
closed-form ``1/2 Lich + (n-1)`` (``kind="analytic"``, the operator of
``linearized_apply``) or the exact derivative of the discrete residual at the
origin (``kind="discrete"``).  The two agree on resolved modes; only the
discrete one makes the fixed-slope iteration contract on grid-scale modes, so
the nonlinear loops use it.  Both blocks are applied matrix-free and
preconditioned by their diagonal, extracted by probing with lattice-colored
basis fields.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, bicgstab, gmres

from .chart_fields import pack_sym, unpack_sym, weighted_sup_norm
from .constraints import (BackgroundJacobian, SourceTensor, linearized_apply,
                          make_source, n_dof, pack, pack_residual, random_direction,
                          residual_gauged, state_to_physical, unpack)
from .curvature import MetricError
from .operators import (background_context, conformal_killing_a, divergence_sym2_a,
                        lichnerowicz_a)

MODES = ("ift-picard", "newton-fd")
KINDS = ("analytic", "discrete")
PRECONDITIONERS = ("none", "diagonal")
KRYLOV = ("gmres", "bicgstab")


class SolverError(RuntimeError):
    """Base class for solver failures; carries the partial report when known."""

    def __init__(self, message, report=None, state=None):
        super().__init__(message)
        self.report = report
        self.state = state


class LinearSolveError(SolverError):
    pass


class SolverDivergence(SolverError):
    pass


@dataclass
class SolverConfig:
    mode: str = "ift-picard"
    linear_tol: float = 1e-10
    linear_maxiter: int = 2000
    tol: float = 1e-10
    maxiter: int = 25
    s: float = 1.5
    continuation_steps: int = 1
    preconditioner: str = "diagonal"
    krylov: str = "gmres"
    jacobian_step: float = 1e-4
    inner_tol: float = 1e-2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.preconditioner not in PRECONDITIONERS:
            raise ValueError(f"preconditioner must be one of {PRECONDITIONERS}")
        if self.krylov not in KRYLOV:
            raise ValueError(f"krylov must be one of {KRYLOV}")
        for name in ("linear_tol", "tol", "jacobian_step", "inner_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("linear_maxiter", "maxiter", "continuation_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class SolveReport:
    mode: str
    converged: bool = False
    residual_history: list = field(default_factory=list)
    linear_iterations: list = field(default_factory=list)
    h_norm: float = float("nan")
    xi_norm: float = float("nan")
    amplitudes: list = field(default_factory=list)
    message: str = ""
    verification: dict | None = None
    wall_time: float = 0.0

    @property
    def iterations(self):
        return len(self.linear_iterations)

    @property
    def residuals(self):
        return [max(pair) for pair in self.residual_history]

    def to_dict(self):
        d = asdict(self)
        d["iterations"] = self.iterations
        return d


# -- background linearisation -------------------------------------------------


def _lattice_colors(grid, modulus=29):
    # no two same-colored nodes are within the composite stencil reach
    idx = np.indices(grid.shape)
    mult = [5**a for a in range(grid.n)]
    return sum(m * i for m, i in zip(mult, idx)) % modulus


class BackgroundOperator:
    """Matrix-free ``L0`` on packed vectors, with cached diagonal preconditioners."""

    def __init__(self, grid, kind="discrete"):
        if kind not in KINDS:
            raise ValueError(f"operator kind must be one of {KINDS}")
        self.grid = grid
        self.kind = kind
        self.ctx = background_context(grid)
        self.jac = BackgroundJacobian(self.ctx) if kind == "discrete" else None
        n = grid.n
        self.nh = n * (n + 1) // 2
        self.k = grid.n_interior
        self.m = grid.interior
        self.rho_i = grid.rho[self.m]
        self._diag = {}
        self.applies = 0

    # embedding helpers
    def _embed(self, v, nc, power):
        arr = np.zeros((nc,) + self.grid.shape)
        arr[:, self.m] = v.reshape(nc, self.k)
        return np.where(self.grid.support, arr / self.grid.rho**power, np.nan)

    def _restrict(self, arr, power):
        return (arr[:, self.m] * self.rho_i**power).ravel()

    def apply_xi_block(self, v):
        self.applies += 1
        xi = self._embed(v, self.grid.n, 1)
        ck, lvl = conformal_killing_a(self.ctx, xi, 0)
        d, _ = divergence_sym2_a(self.ctx, ck, lvl)
        return self._restrict(d, 1)

    def apply_h_block(self, v):
        self.applies += 1
        n = self.grid.n
        h = unpack_sym(self._embed(v, self.nh, 2), n)
        if self.jac is not None:
            return self._restrict(pack_sym(self.jac.apply_h_a(h)), 2)
        lich, _ = lichnerowicz_a(self.ctx, h, 0)
        return self._restrict(pack_sym(0.5 * lich + (n - 1) * h), 2)

    def coupling(self, vxi):
        """``rho^2 Lo(xi)`` on interior nodes, the row-1 term moved to the rhs."""
        xi = self._embed(vxi, self.grid.n, 1)
        ck, _ = conformal_killing_a(self.ctx, xi, 0)
        return self._restrict(pack_sym(ck), 2)

    def apply(self, vec):
        nh = self.nh * self.k
        vh, vx = vec[:nh], vec[nh:]
        r2 = self.apply_xi_block(vx)
        r1 = self.apply_h_block(vh) - self.coupling(vx)
        return np.concatenate([r1, r2])

    def diagonal(self, block):
        if block not in self._diag:
            apply, nc = ((self.apply_h_block, self.nh) if block == "h"
                         else (self.apply_xi_block, self.grid.n))
            colors = _lattice_colors(self.grid)[self.m]
            out = np.zeros(nc * self.k)
            for c in range(nc):
                for q in np.unique(colors):
                    sel = c * self.k + np.flatnonzero(colors == q)
                    e = np.zeros(nc * self.k)
                    e[sel] = 1.0
                    out[sel] = apply(e)[sel]
            if np.any(out <= 0):
                raise LinearSolveError(f"non-positive diagonal entry in the {block} block")
            self._diag[block] = out
        return self._diag[block]


_OPERATORS = {}


def background_operator(grid, kind="discrete"):
    """Cached operator per grid geometry (only the latest geometry is kept)."""
    gkey = (grid.n, grid.N, grid.r_max, grid.fd_order, grid.conformal)
    if any(k[0] != gkey for k in _OPERATORS):
        _OPERATORS.clear()
    if (gkey, kind) not in _OPERATORS:
        _OPERATORS[(gkey, kind)] = BackgroundOperator(grid, kind)
    return _OPERATORS[(gkey, kind)]


def _krylov(apply, b, diag, config, rtol, maxiter, label):
    size = b.size
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(size), 0, 0.0
    if not np.all(np.isfinite(b)):
        raise LinearSolveError(f"non-finite right-hand side in the {label} block")
    op = LinearOperator((size, size), matvec=apply, dtype=float)
    M = None
    if config.preconditioner == "diagonal":
        inv = 1.0 / diag()
        M = LinearOperator((size, size), matvec=lambda v: inv * v, dtype=float)
    count = [0]

    def cb(_):
        count[0] += 1

    if config.krylov == "gmres":
        x, info = gmres(op, b, rtol=rtol, atol=0.0, restart=200, maxiter=maxiter,
                        M=M, callback=cb, callback_type="pr_norm")
    else:
        x, info = bicgstab(op, b, rtol=rtol, atol=0.0, maxiter=maxiter, M=M,
                           callback=cb)
    if not np.all(np.isfinite(x)):
        raise LinearSolveError(f"NaN encountered in the {label} block solve")
    achieved = np.linalg.norm(apply(x) - b) / bnorm
    if info > 0 and achieved > rtol:
        raise LinearSolveError(
            f"{label} block: no convergence after {count[0]} iterations "
            f"(relative residual {achieved:.3e} > {rtol:.1e})")
    return x, count[0], achieved


def linear_solve_packed(grid, rhs, config: SolverConfig, rtol=None, maxiter=None,
                        kind="discrete"):
    """Solve ``L0 x = rhs`` for packed vectors; returns ``(x, info)``."""
    op = background_operator(grid, kind)
    rtol = config.linear_tol if rtol is None else rtol
    maxiter = config.linear_maxiter if maxiter is None else maxiter
    nh = op.nh * op.k
    r1, r2 = rhs[:nh], rhs[nh:]
    xx, it2, res2 = _krylov(op.apply_xi_block, r2, lambda: op.diagonal("xi"), config,
                            rtol, maxiter, "xi")
    b1 = r1 + op.coupling(xx) if np.any(xx) else r1
    xh, it1, res1 = _krylov(op.apply_h_block, b1, lambda: op.diagonal("h"), config,
                            rtol, maxiter, "h")
    info = {"iterations_xi": it2, "iterations_h": it1,
            "relres_xi": res2, "relres_h": res1}
    return np.concatenate([xh, xx]), info


def linear_solve(rhs, config: SolverConfig = None, grid=None, kind="analytic"):
    """Solve ``L0 (dh, dxi) = rhs`` for a residual pair or packed vector.

    ``kind`` selects the operator handle: ``"analytic"`` inverts
    ``linearized_apply``, ``"discrete"`` the exact background Jacobian.
    Returns the rescaled correction state and an info dict with iteration
    counts and achieved relative residuals of each block.
    """
    config = config or SolverConfig()
    if grid is None:
        grid = rhs.E1.grid
    vec = rhs if isinstance(rhs, np.ndarray) else pack_residual(rhs)
    x, info = linear_solve_packed(grid, vec, config, kind=kind)
    return unpack(x, grid), info


def manufactured_recovery(grid, seed=0, config: SolverConfig = None, kind="analytic"):
    """Solve ``L0 x = L0 d`` for a random smooth ``d``; relative weighted error of ``x``."""
    config = config or SolverConfig()
    d = random_direction(grid, seed)
    if kind == "analytic":
        rhs = linearized_apply(background_context(grid), *state_to_physical(d))
    else:
        rhs = BackgroundJacobian(background_context(grid)).apply(*state_to_physical(d))
    x, info = linear_solve(rhs, config, grid, kind=kind)
    diff = x.axpy(-1.0, d)
    region = grid.interior
    num = max(weighted_sup_norm(f, config.s, region) for f in state_to_physical(diff))
    den = max(weighted_sup_norm(f, config.s, region) for f in state_to_physical(d))
    info["relative_error"] = float(num / den)
    return info


# -- nonlinear iterations --------------------------------------------------------


def _residual(grid, x, source):
    state = unpack(x, grid)
    pair = residual_gauged(state, source)
    return pair, pack_residual(pair)


def _finish(report, grid, x, config, t0):
    state = unpack(x, grid)
    dh, dxi = state_to_physical(state)
    region = grid.interior
    report.h_norm = weighted_sup_norm(dh, config.s, region)
    report.xi_norm = weighted_sup_norm(dxi, config.s, region)
    report.wall_time = time.perf_counter() - t0
    return state, report


def _diverged(history):
    r = [max(p) for p in history]
    if len(r) >= 3 and r[-1] > r[-2] > r[-3]:
        return "residual increased on two consecutive iterations"
    if r[-1] > 1e6 * r[0]:
        return "residual exceeded 1e6 times its initial value"
    return None


def _nonlinear(source: SourceTensor, config: SolverConfig, x0=None, report=None):
    grid = source.field.grid
    t0 = time.perf_counter()
    if report is None:
        report = SolveReport(config.mode)
    report.amplitudes.append(source.recipe.amplitude)
    x = np.zeros(n_dof(grid)) if x0 is None else x0.copy()
    region = grid.interior
    history = []

    def record(pair):
        history.append(pair.weighted_norms(config.s, region))
        report.residual_history.append(history[-1])

    def fail(exc_cls, msg):
        report.message = msg
        state, rep = _finish(report, grid, x, config, t0)
        raise exc_cls(msg, rep, state)

    try:
        pair, F = _residual(grid, x, source)
    except MetricError as exc:
        fail(SolverDivergence, f"initial state invalid: {exc}")
    record(pair)
    for it in range(config.maxiter + 1):
        if not np.isfinite(max(history[-1])):
            fail(SolverDivergence, "non-finite residual")
        if max(history[-1]) <= config.tol:
            report.converged = True
            report.message = f"converged in {it} iterations"
            return _finish(report, grid, x, config, t0)
        why = _diverged(history)
        if why:
            fail(SolverDivergence, why)
        if it == config.maxiter:
            break
        try:
            if config.mode == "ift-picard":
                dx, info = linear_solve_packed(grid, F, config)
            else:
                eta = min(config.inner_tol, max(max(history[-1]), config.linear_tol))
                dx, info = _newton_step(grid, x, F, source, config, eta)
        except LinearSolveError as exc:
            fail(LinearSolveError, str(exc))
        report.linear_iterations.append(info)
        x = x - dx
        try:
            pair, F = _residual(grid, x, source)
        except MetricError as exc:
            fail(SolverDivergence, f"metric lost positivity: {exc}")
        record(pair)
    fail(SolverDivergence, f"no convergence in {config.maxiter} iterations")


def ift_iterate(source: SourceTensor, config: SolverConfig = None, x0=None):
    """Fixed-slope iteration ``x <- x - L0^{-1} F(x)``."""
    config = config or SolverConfig()
    if config.mode != "ift-picard":
        config = SolverConfig(**{**config.to_dict(), "mode": "ift-picard"})
    return _nonlinear(source, config, x0)


def newton_fd(source: SourceTensor, config: SolverConfig = None, x0=None):
    """Newton iteration with finite-difference Jacobian products.

    Each step solves ``J dx = F`` by flexible GMRES, right-preconditioned by
    an inexact background solve.
    """
    config = config or SolverConfig(mode="newton-fd")
    if config.mode != "newton-fd":
        config = SolverConfig(**{**config.to_dict(), "mode": "newton-fd"})
    return _nonlinear(source, config, x0)


def _newton_step(grid, x, F, source, config, eta):
    t = config.jacobian_step

    def jv(v):
        scale = np.max(np.abs(v))
        if scale == 0.0:
            return np.zeros_like(v)
        d = v / scale
        _, fp = _residual(grid, x + t * d, source)
        _, fm = _residual(grid, x - t * d, source)
        return (fp - fm) * (scale / (2 * t))

    def prec(r):
        return linear_solve_packed(grid, r, config, rtol=config.inner_tol)[0]

    dx, outer, relres = fgmres(jv, F, prec, rtol=eta, maxiter=40)
    return dx, {"outer": outer, "relres": relres, "forcing": eta}


def fgmres(apply, b, prec, rtol=1e-10, maxiter=40):
    """Flexible GMRES (no restart) with a variable right preconditioner.

    Stops early when the Krylov residual stagnates; returns ``(x, its, relres)``.
    """
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    V = [b / bnorm]
    Z = []
    H = np.zeros((maxiter + 1, maxiter))
    g = np.zeros(maxiter + 1)
    g[0] = bnorm
    cs, sn = np.zeros(maxiter), np.zeros(maxiter)
    k = 0
    relres = 1.0
    for k in range(maxiter):
        z = prec(V[k])
        w = apply(z)
        Z.append(z)
        for i in range(k + 1):
            H[i, k] = w @ V[i]
            w = w - H[i, k] * V[i]
        hnext = np.linalg.norm(w)
        H[k + 1, k] = hnext
        for i in range(k):
            a, c = H[i, k], H[i + 1, k]
            H[i, k], H[i + 1, k] = cs[i] * a + sn[i] * c, -sn[i] * a + cs[i] * c
        r = np.hypot(H[k, k], H[k + 1, k])
        cs[k], sn[k] = H[k, k] / r, H[k + 1, k] / r
        H[k, k] = r
        H[k + 1, k] = 0.0
        g[k + 1] = -sn[k] * g[k]
        g[k] = cs[k] * g[k]
        prev = relres
        relres = abs(g[k + 1]) / bnorm
        stalled = k >= 3 and relres > 0.9 * prev
        if relres <= rtol or stalled or hnext == 0.0:
            break
        V.append(w / hnext)
    y = np.linalg.solve(np.triu(H[: k + 1, : k + 1]), g[: k + 1])
    x = sum(yi * zi for yi, zi in zip(y, Z))
    return x, k + 1, relres


def continuation(source: SourceTensor, steps=None, config: SolverConfig = None):
    """Amplitude ramp ``eps * j / steps``, warm-starting each solve."""
    config = config or SolverConfig()
    steps = config.continuation_steps if steps is None else steps
    if steps < 1:
        raise ValueError("continuation needs steps >= 1")
    grid = source.field.grid
    recipe = source.recipe
    report = SolveReport(config.mode)
    x = None
    state = None
    for j in range(1, steps + 1):
        src = make_source(recipe.scaled(recipe.amplitude * j / steps), grid)
        state, report = _nonlinear(src, config, x, report)
        x = pack(state)
    return state, report


def solve(source: SourceTensor, config: SolverConfig = None):
    """Dispatch on the configured mode, with continuation when requested."""
    config = config or SolverConfig()
    return continuation(source, config.continuation_steps, config)
