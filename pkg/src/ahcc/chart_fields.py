"""Grid, background geometry and tensor fields on the truncated Poincaré ball.

All fields live on a single Cartesian chart ``[-r_max, r_max]^n`` with one
value array per component.  Arrays are shaped ``(components..., N, ..., N)``;
component axes always come first so ``einsum`` can address the node axes with
``...``.

Derivatives are taken on the conformally rescaled components.  A physical
component array ``u`` of conformal weight ``w`` is written ``u = rho**-w * v``
with ``v`` smooth up to the boundary at infinity, the stencil acts on ``v`` and
the ``rho`` factor is differentiated analytically.  With ``conformal=False``
the stencil acts on ``u`` directly (used for flat-space checks).

Every derived array carries a *level*: the number of derivative passes that
produced it.  Level 0 data are valid on the support ball ``|x| <= r_ext``; a
pass maps level ``k`` to level ``k+1`` and is valid wherever a stencil window
of the full width exists inside the level ``k`` region (centered when
possible, shifted up to one-sided otherwise).  Outside its region an array
holds NaN.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

EXTERIOR, COLLAR, INTERIOR = 0, 1, 2

FIELD_MAGIC = b"AHCF"
FIELD_VERSION = 1


class GridError(ValueError):
    """Invalid grid parameters or access outside the valid region."""


class FieldFormatError(ValueError):
    """A field file does not match the expected layout."""


def sym_pairs(n):
    """Upper-triangular index pairs ``(i, j)``, ``i <= j``, in storage order."""
    return [(i, j) for i in range(n) for j in range(i, n)]


def fd_weights(offsets, order=1):
    """Finite-difference weights for the ``order``-th derivative on unit spacing."""
    offsets = np.asarray(offsets, dtype=float)
    m = len(offsets)
    A = np.vander(offsets, m, increasing=True).T
    rhs = np.zeros(m)
    rhs[order] = float(np.prod(np.arange(1, order + 1)))
    return np.linalg.solve(A, rhs)


@dataclass(frozen=True)
class BackgroundGeometry:
    """Poincaré ball metric ``g0 = 4 delta / (1 - |x|^2)^2 = rho^-2 delta``."""

    n: int

    def __post_init__(self):
        if self.n < 3:
            raise GridError(f"dimension must be >= 3, got {self.n}")

    @staticmethod
    def rho_at(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * (1.0 - np.sum(x * x, axis=0))

    def g0_at(self, x):
        """Metric components at point(s) ``x`` (first axis = coordinate)."""
        rho = self.rho_at(x)
        eye = np.eye(self.n).reshape((self.n, self.n) + (1,) * np.ndim(rho))
        return eye / rho**2

    def ginv0_at(self, x):
        rho = self.rho_at(x)
        eye = np.eye(self.n).reshape((self.n, self.n) + (1,) * np.ndim(rho))
        return eye * rho**2


class FieldGrid:
    """Masked Cartesian grid over the ball ``|x| <= r_max``.

    Node classes follow ``mask``: a node is INTERIOR when ``|x| < r_max`` and
    every axis neighbour within the stencil radius satisfies
    ``|x| <= r_max``; COLLAR when ``|x| <= r_max`` otherwise; EXTERIOR beyond.
    Unknowns live on interior nodes only.  Geometry (``g0`` and anything built
    from it) is available on the wider support ball ``|x| <= r_ext`` so that
    nested derivatives at interior nodes never need extrapolated data.
    """

    def __init__(self, n, N, r_max=0.9, fd_order=4, conformal=True):
        if not isinstance(n, (int, np.integer)) or n < 3:
            raise GridError(f"dimension n must be an integer >= 3, got {n!r}")
        if not isinstance(N, (int, np.integer)) or N < 9 or N % 2 == 0:
            raise GridError(f"points_per_axis must be odd and >= 9, got {N!r}")
        if not 0.0 < r_max < 1.0:
            raise GridError(f"r_max must lie in (0, 1), got {r_max!r}")
        if fd_order not in (2, 4):
            raise GridError(f"fd_order must be 2 or 4, got {fd_order!r}")
        self.n = int(n)
        self.N = int(N)
        self.r_max = float(r_max)
        self.fd_order = int(fd_order)
        self.conformal = bool(conformal)
        self.h = 2.0 * self.r_max / (self.N - 1)
        self.radius = self.fd_order // 2
        self.r_ext = self.r_max + 0.5 * (1.0 - self.r_max)
        self.background = BackgroundGeometry(self.n)
        self.shape = (self.N,) * self.n
        self._levels = {}
        self._shift_tables = {}
        self._rho_pows = {}

    def __repr__(self):
        return (f"FieldGrid(n={self.n}, N={self.N}, r_max={self.r_max}, "
                f"fd_order={self.fd_order}, conformal={self.conformal})")

    def key(self):
        return (self.n, self.N, self.r_max, self.fd_order, self.conformal)

    @cached_property
    def axis_coords(self):
        # symmetric construction keeps the mask exactly symmetric under x -> -x
        half = self.h * np.arange(self.N // 2 + 1)
        return np.concatenate([-half[:0:-1], half])

    @cached_property
    def x(self):
        return np.stack(np.meshgrid(*([self.axis_coords] * self.n), indexing="ij"))

    @cached_property
    def r2(self):
        return np.sum(self.x**2, axis=0)

    @cached_property
    def support(self):
        return self.r2 <= self.r_ext**2

    @cached_property
    def rho(self):
        """Defining function on the support, NaN elsewhere."""
        return np.where(self.support, 0.5 * (1.0 - self.r2), np.nan)

    @cached_property
    def x_over_rho(self):
        # -d(log rho)/dx_a
        return self.x / self.rho

    @cached_property
    def mask(self):
        inside = self.r2 <= self.r_max**2 * (1 + 1e-14)
        strict = self.r2 < self.r_max**2 * (1 - 1e-14)
        interior = strict.copy()
        for a in range(self.n):
            for j in range(1, self.radius + 1):
                for sgn in (1, -1):
                    interior &= _shifted(inside, a, sgn * j, fill=False)
        out = np.full(self.shape, EXTERIOR, dtype=np.int8)
        out[inside] = COLLAR
        out[interior] = INTERIOR
        return out

    @cached_property
    def interior(self):
        return self.mask == INTERIOR

    @cached_property
    def n_interior(self):
        return int(self.interior.sum())

    def core(self, radius=0.7):
        return self.r2 <= radius**2 * (1 + 1e-14)

    @cached_property
    def dvol(self):
        """Riemannian volume element of ``g0`` per node."""
        return self.rho ** (-self.n) * self.h**self.n

    def node_index(self, coords):
        """Integer node index of the node at (or nearest to) point ``coords``."""
        idx = np.rint((np.asarray(coords, float) + self.r_max) / self.h).astype(int)
        if np.any(idx < 0) or np.any(idx >= self.N):
            raise GridError(f"point {coords} lies outside the grid box")
        return tuple(int(i) for i in idx)

    # -- derivative levels --------------------------------------------------

    def level_mask(self, level):
        """Nodes where an array produced by ``level`` derivative passes is valid."""
        if level in self._levels:
            return self._levels[level]
        if level == 0:
            self._levels[0] = self.support
            return self.support
        prev = self.level_mask(level - 1)
        valid = prev.copy()
        tables = []
        for a in range(self.n):
            shift = np.full(self.shape, 99, dtype=np.int8)
            for s in _shift_order(self.radius):
                ok = prev.copy()
                for j in range(s - self.radius, s + self.radius + 1):
                    ok &= _shifted(prev, a, j, fill=False)
                shift = np.where((shift == 99) & ok, s, shift)
            valid &= shift != 99
            tables.append(shift)
        self._levels[level] = valid
        self._shift_tables[level - 1] = [
            self._compress_shifts(t, valid) for t in tables
        ]
        return valid

    def _compress_shifts(self, table, valid):
        out = {}
        flat = table.ravel()
        vflat = valid.ravel()
        for s in np.unique(flat[vflat]):
            if s == 0:
                continue
            out[int(s)] = np.flatnonzero(vflat & (flat == s))
        return out

    @cached_property
    def _weights(self):
        k = self.radius
        return {s: fd_weights(np.arange(s - k, s + k + 1)) / self.h
                for s in range(-k, k + 1)}

    def _rho_pow(self, w):
        cache = self._rho_pows
        if w not in cache:
            cache[w] = self.rho**w
        return cache[w]

    def diff(self, arr, axis, level, weight=0):
        """Partial derivative along ``axis`` of a component array.

        ``arr`` holds physical components valid at derivative level ``level``
        and ``weight`` is its conformal weight (covariant minus contravariant
        rank).  Returns an array valid at level ``level + 1``.
        """
        arr = np.asarray(arr, dtype=float)
        valid_out = self.level_mask(level + 1)
        tables = self._shift_tables[level][axis]
        w = weight if self.conformal else 0
        rw = self._rho_pow(w)
        v = arr * rw if w else arr
        v = np.where(self.level_mask(level), v, 0.0)
        k = self.radius
        wts = self._weights
        lead = arr.shape[: arr.ndim - self.n]
        ax = len(lead) + axis
        out = correlate1d(v, wts[0], axis=ax, mode="constant", cval=0.0)
        if tables:
            vf = v.reshape(lead + (-1,))
            of = out.reshape(lead + (-1,))
            stride = self.N ** (self.n - 1 - axis)
            for s, idx in tables.items():
                acc = np.zeros(lead + (idx.size,))
                for j, c in zip(range(s - k, s + k + 1), wts[s]):
                    acc += c * vf[..., idx + j * stride]
                of[..., idx] = acc
            out = of.reshape(out.shape)
        if w:
            out = out / rw + w * self.x_over_rho[axis] * arr
        return np.where(valid_out, out, np.nan)

    def grad(self, arr, level, weight=0):
        """Stack of partial derivatives, derivative index first."""
        return np.stack([self.diff(arr, a, level, weight) for a in range(self.n)])


def build_grid(n, N, r_max=0.9, fd_order=4, conformal=True):
    return FieldGrid(n, N, r_max, fd_order, conformal)


def _shift_order(k):
    order = [0]
    for s in range(1, k + 1):
        order += [-s, s]
    return order


def _shifted(a, axis, j, fill):
    """``out[i] = a[i + j]`` along ``axis``; positions past the edge get ``fill``."""
    out = np.full_like(a, fill)
    n = a.shape[axis]
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if j >= 0:
        src[axis] = slice(j, n)
        dst[axis] = slice(0, n - j)
    else:
        src[axis] = slice(0, n + j)
        dst[axis] = slice(-j, n)
    out[tuple(dst)] = a[tuple(src)]
    return out


# -- fields -------------------------------------------------------------------


class Field:
    """Component values on the grid.

    ``data`` has shape ``(ncomp, N, ..., N)``.  Symmetric 2-tensors store the
    ``n(n+1)/2`` upper-triangular components.  ``rescaled`` marks conformally
    rescaled components (``rho**2 h`` for 2-tensors, ``rho xi`` for one-forms).
    """

    rank = 0

    def __init__(self, grid, data, rescaled=False, level=0):
        self.grid = grid
        self.data = data
        self.rescaled = bool(rescaled)
        self.level = int(level)

    def __repr__(self):
        flag = "rescaled" if self.rescaled else "physical"
        return f"{type(self).__name__}({flag}, level={self.level}, grid={self.grid!r})"

    @property
    def weight(self):
        return self.rank

    def full(self):
        return self.data[0] if self.rank == 0 else self.data

    def replace(self, data, rescaled=None, level=None):
        return type(self)(self.grid, data,
                          self.rescaled if rescaled is None else rescaled,
                          self.level if level is None else level)

    def check_finite(self, region=None):
        region = self.grid.mask != EXTERIOR if region is None else region
        if not np.all(np.isfinite(self.data[:, region])):
            raise GridError(f"{type(self).__name__} has non-finite values in region")
        return self


class ScalarField(Field):
    rank = 0

    def __init__(self, grid, data, rescaled=False, level=0):
        data = np.asarray(data, float)
        if data.ndim == grid.n:
            data = data[None]
        super().__init__(grid, data, rescaled, level)


class OneFormField(Field):
    rank = 1

    def __init__(self, grid, data, rescaled=False, level=0):
        super().__init__(grid, np.asarray(data, float), rescaled, level)


class SymTensor2Field(Field):
    rank = 2

    def __init__(self, grid, data, rescaled=False, level=0):
        data = np.asarray(data, float)
        n = grid.n
        if data.ndim == n + 2 and data.shape[:2] == (n, n):
            data = pack_sym(data)
        super().__init__(grid, data, rescaled, level)

    def full(self):
        return unpack_sym(self.data, self.grid.n)


def pack_sym(full):
    n = full.shape[0]
    return np.stack([full[i, j] for i, j in sym_pairs(n)])


def unpack_sym(packed, n):
    idx = np.zeros((n, n), dtype=int)
    for c, (i, j) in enumerate(sym_pairs(n)):
        idx[i, j] = idx[j, i] = c
    return packed[idx]


def field_from_full(grid, arr, rank, level=0, rescaled=False):
    cls = {0: ScalarField, 1: OneFormField, 2: SymTensor2Field}[rank]
    return cls(grid, arr, rescaled=rescaled, level=level)


def zeros(grid, rank, rescaled=False):
    ncomp = {0: 1, 1: grid.n, 2: grid.n * (grid.n + 1) // 2}[rank]
    return field_from_full(grid, np.zeros((ncomp,) + grid.shape), rank,
                           rescaled=rescaled)


def metric_field(grid):
    """``g0`` as a physical SymTensor2Field on the support ball."""
    return SymTensor2Field(grid, grid.background.g0_at(grid.x) * _support_nan(grid))


def _support_nan(grid):
    return np.where(grid.support, 1.0, np.nan)


def fd_partial(field, axis, node):
    """Finite-difference partial derivative of ``field`` at a single node.

    Centered at interior nodes; shifted (up to one-sided) of the same order
    where the centered window leaves the valid region.  Returns one value per
    stored component.
    """
    grid = field.grid
    node = tuple(node)
    if grid.mask[node] == EXTERIOR:
        raise GridError(f"node {node} is exterior")
    d = grid.diff(field.data, axis, field.level,
                  0 if field.rescaled else field.weight)
    return d[(slice(None),) + node]


def _conformal_factor(field):
    return field.grid.rho ** field.rank


def to_physical(field):
    if not field.rescaled:
        raise GridError("field is already in physical components")
    if field.rank == 0:
        return field.replace(field.data.copy(), rescaled=False)
    return field.replace(field.data / _conformal_factor(field), rescaled=False)


def to_rescaled(field):
    if field.rescaled:
        raise GridError("field is already in rescaled components")
    if field.rank == 0:
        return field.replace(field.data.copy(), rescaled=True)
    return field.replace(field.data * _conformal_factor(field), rescaled=True)


def frame_norm_array(arr, rank, grid):
    """Pointwise ``|u|_g0`` of a full physical component array."""
    rho2 = grid.rho**2
    if rank == 0:
        return np.abs(arr)
    if rank == 1:
        return np.sqrt(rho2 * np.sum(arr**2, axis=0))
    lead = arr.shape[: arr.ndim - grid.n]
    sq = np.sum(arr.reshape((-1,) + grid.shape) ** 2, axis=0)
    return np.sqrt(rho2 ** len(lead) * sq)


def frame_norm(field, node=None):
    """Norm of a physical field in the ``g0`` frame, at one node or everywhere."""
    if field.rescaled:
        raise GridError("frame_norm needs a physical-flagged field")
    vals = frame_norm_array(field.full(), field.rank, field.grid)
    return vals if node is None else float(vals[tuple(node)])


def _region(field, region):
    grid = field.grid
    region = grid.interior if region is None else region
    if not np.all(grid.level_mask(field.level)[region]):
        raise GridError("region extends beyond the valid region of the field")
    return region


def weighted_sup_norm(field, s, region=None):
    """``max rho^-s |u|_g0`` over ``region`` (default: interior nodes)."""
    region = _region(field, region)
    vals = frame_norm(field)[region] * field.grid.rho[region] ** (-s)
    return float(vals.max()) if vals.size else 0.0


def _pointwise_inner(a, b, rank, grid):
    rho2 = grid.rho**2
    if rank == 0:
        return a * b
    return rho2**rank * np.sum((a * b).reshape((-1,) + grid.shape), axis=0)


def l2_inner(field_a, field_b, region=None):
    """Discrete L2 pairing ``sum <a, b>_g0 dV_g0`` over ``region``."""
    if field_a.rank != field_b.rank:
        raise GridError(f"rank mismatch: {field_a.rank} vs {field_b.rank}")
    if field_a.rescaled or field_b.rescaled:
        raise GridError("l2_inner needs physical-flagged fields")
    grid = field_a.grid
    region = _region(field_a, region)
    _region(field_b, region)
    vals = _pointwise_inner(field_a.full(), field_b.full(), field_a.rank, grid)
    return float(np.sum(vals[region] * grid.dvol[region]))


# -- field files ----------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIdIB")


def write_field(path, field):
    """Write ``field`` in the AHCF layout (exterior nodes stored as zeros)."""
    grid = field.grid
    data = np.where(grid.mask != EXTERIOR, field.data, 0.0)
    data = np.nan_to_num(data, nan=0.0)
    header = _HEADER.pack(FIELD_MAGIC, FIELD_VERSION, grid.n, grid.N,
                          grid.r_max, field.rank, int(field.rescaled))
    # row-major over nodes, components fastest
    body = np.moveaxis(data, 0, -1).astype("<f8").tobytes()
    Path(path).write_bytes(header + body)


def read_field(path, grid=None, fd_order=4):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FieldFormatError(f"{path}: truncated header")
    magic, version, n, N, r_max, rank, flag = _HEADER.unpack_from(raw)
    if magic != FIELD_MAGIC:
        raise FieldFormatError(f"{path}: bad magic {magic!r}")
    if version != FIELD_VERSION:
        raise FieldFormatError(f"{path}: unsupported version {version}")
    if rank not in (0, 1, 2):
        raise FieldFormatError(f"{path}: unsupported rank {rank}")
    if grid is None:
        grid = build_grid(n, N, r_max, fd_order)
    elif (grid.n, grid.N) != (n, N) or abs(grid.r_max - r_max) > 1e-15:
        raise FieldFormatError(
            f"{path}: grid mismatch (file n={n}, N={N}, r_max={r_max}; "
            f"expected n={grid.n}, N={grid.N}, r_max={grid.r_max})")
    ncomp = {0: 1, 1: n, 2: n * (n + 1) // 2}[rank]
    count = ncomp * N**n
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != count:
        raise FieldFormatError(f"{path}: expected {count} values, found {body.size}")
    data = np.moveaxis(body.reshape(grid.shape + (ncomp,)), -1, 0).astype(float)
    return field_from_full(grid, data, rank, rescaled=bool(flag))


def iter_nodes(grid, which=INTERIOR):
    for idx in itertools.product(range(grid.N), repeat=grid.n):
        if grid.mask[idx] == which:
            yield idx
