"""Sparse-stationary 1.5D distributed SpMM and the distributed Chebyshev filter.

The sparse matrix is tiled q x q and never moves.  Tall-skinny blocks live in
1D row blocks under one of two ownership maps relative to the current grid
orientation:

* ``v`` layout: the process at grid position (i, j) owns row block j*q + i;
* ``u`` layout: the same process owns row block i*q + j.

One SpMM gathers ``v``-layout blocks down each grid column, multiplies by the
local tile, and reduce-scatters partial stripes across each grid row, leaving
the result in ``u`` layout.  Because a ``u``-layout matrix is exactly a
``v``-layout matrix on the transposed grid, transposing the grid and
multiplying by a distributed identity (pure block movement, zero flops)
returns results to ``v`` layout; the filter interleaves that redistribution
after every SpMM so its three-term updates only ever combine same-layout
blocks.  This relies on the sparse matrix being symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from chebspectral import kernels
from chebspectral.chebdav import FilterBounds, filter_scalars
from chebspectral.graph import CsrMatrix, block_ranges, csr_tile, tile_ranges
from chebspectral.procgrid import GridTopology, RankContext


class LayoutError(ValueError):
    """Operands have incompatible layouts or grid orientations."""


@dataclass(frozen=True)
class DistSparse2D:
    """One rank's tile of a 2D-partitioned sparse matrix."""

    grid: GridTopology
    global_n: int
    local: CsrMatrix          # tile A[i, j] for this rank's grid position
    row_range: tuple[int, int]
    col_range: tuple[int, int]
    is_identity: bool = False  # enables the zero-flop block-copy fast path


@dataclass
class DistDense1D:
    """One rank's row block of a 1D-partitioned tall-skinny matrix."""

    grid: GridTopology
    layout: str               # "v" or "u"
    global_n: int
    cols: int
    block_index: int
    row_range: tuple[int, int]
    local: np.ndarray         # (block rows, cols)


def block_of(grid: GridTopology, rank: int, layout: str) -> int:
    i, j = grid.coords_of(rank)
    if layout == "v":
        return j * grid.q + i
    if layout == "u":
        return i * grid.q + j
    raise LayoutError(f"unknown layout {layout!r}")


def owner_of_block(grid: GridTopology, b: int, layout: str) -> int:
    q = grid.q
    if layout == "v":
        return grid.rank_of(b % q, b // q)
    if layout == "u":
        return grid.rank_of(b // q, b % q)
    raise LayoutError(f"unknown layout {layout!r}")


# ----------------------------------------------------------------------------
# distribution plumbing
# ----------------------------------------------------------------------------

def distribute_sparse(a: CsrMatrix, grid: GridTopology, rank: int) -> DistSparse2D:
    """This rank's tile of the q x q partition (tile ranges follow the 1D split)."""
    i, j = grid.coords_of(rank)
    ranges = tile_ranges(a.n, grid.q)
    return DistSparse2D(grid=grid, global_n=a.n,
                        local=csr_tile(a, ranges[i], ranges[j]),
                        row_range=ranges[i], col_range=ranges[j])


def distribute_identity(grid: GridTopology, n: int, rank: int) -> DistSparse2D:
    """Distributed identity: diagonal tiles are identities, the rest are empty."""
    i, j = grid.coords_of(rank)
    ranges = tile_ranges(n, grid.q)
    r0, r1 = ranges[i]
    if i == j:
        local = CsrMatrix.identity(r1 - r0)
    else:
        local = CsrMatrix(n=r1 - r0,
                          row_ptr=np.zeros(r1 - r0 + 1, dtype=np.int64),
                          col_idx=np.empty(0, dtype=np.int64),
                          values=np.empty(0, dtype=np.float64))
    return DistSparse2D(grid=grid, global_n=n, local=local,
                        row_range=ranges[i], col_range=ranges[j],
                        is_identity=True)


def distribute_dense(v: np.ndarray, grid: GridTopology, layout: str,
                     rank: int) -> DistDense1D:
    """Slice this rank's row block out of a replicated tall-skinny matrix."""
    v = np.asarray(v, dtype=np.float64)
    b = block_of(grid, rank, layout)
    r0, r1 = block_ranges(v.shape[0], grid.p)[b]
    return DistDense1D(grid=grid, layout=layout, global_n=v.shape[0],
                       cols=v.shape[1], block_index=b, row_range=(r0, r1),
                       local=v[r0:r1].copy())


def collect_dense(dv: DistDense1D, ctx: RankContext) -> np.ndarray:
    """Gather all row blocks; every rank returns the full matrix."""
    grid = dv.grid
    blocks = block_ranges(dv.global_n, grid.p)
    b_max = blocks[0][1] - blocks[0][0] if blocks else 0
    gathered = ctx.allgather(grid.all_comm(), _pad_rows(dv.local, b_max))
    out = np.empty((dv.global_n, dv.cols))
    for b, (r0, r1) in enumerate(blocks):
        out[r0:r1] = gathered[owner_of_block(grid, b, dv.layout)][:r1 - r0]
    return out


def _pad_rows(x: np.ndarray, rows: int) -> np.ndarray:
    if x.shape[0] == rows:
        return x
    out = np.zeros((rows, x.shape[1]))
    out[:x.shape[0]] = x
    return out


# ----------------------------------------------------------------------------
# 1.5D SpMM
# ----------------------------------------------------------------------------

def _local_product(a: DistSparse2D, stripe: np.ndarray,
                   ctx: RankContext) -> np.ndarray:
    """Tile times gathered stripe; identity tiles copy rows at zero flops."""
    tile = a.local
    rows = a.row_range[1] - a.row_range[0]
    if a.is_identity:
        i, j = a.grid.coords_of(ctx.rank)
        if i == j:
            return stripe.copy()
        return np.zeros((rows, stripe.shape[1]))
    out = kernels.csr_matmul(tile.n, tile.row_ptr, tile.col_idx, tile.values, stripe)
    ctx.counters.add_flops(2 * tile.nnz * stripe.shape[1])
    return out


def spmm_15d(a: DistSparse2D, v: DistDense1D, ctx: RankContext) -> DistDense1D:
    """Distributed product: gather v-blocks down the column, multiply the local
    tile, reduce-scatter partials across the row; result lands in u layout."""
    if v.layout != "v":
        raise LayoutError(
            f"spmm_15d needs a v-layout operand, got {v.layout!r} "
            "(redistribute the previous result first)")
    if a.grid != v.grid:
        raise LayoutError("operands live on different grid orientations")
    if a.global_n != v.global_n:
        raise ValueError("dimension mismatch between matrix and block")
    grid = a.grid
    q = grid.q
    i, j = grid.coords_of(ctx.rank)
    blocks = block_ranges(a.global_n, grid.p)
    b_max = blocks[0][1] - blocks[0][0]
    k = v.cols

    gathered = ctx.allgather(grid.col_comm(j), _pad_rows(v.local, b_max))
    stripe_parts = []
    for ell in range(q):
        b = j * q + ell
        stripe_parts.append(gathered[ell][:blocks[b][1] - blocks[b][0]])
    stripe = np.vstack(stripe_parts) if q > 1 else stripe_parts[0]

    partial = _local_product(a, stripe, ctx)

    padded = np.zeros((q * b_max, k))
    off = 0
    for ell in range(q):
        b = i * q + ell
        r = blocks[b][1] - blocks[b][0]
        padded[ell * b_max:ell * b_max + r] = partial[off:off + r]
        off += r
    mine = ctx.reduce_scatter(grid.row_comm(i), padded)

    b_out = i * q + j
    r0, r1 = blocks[b_out]
    return DistDense1D(grid=grid, layout="u", global_n=a.global_n, cols=k,
                       block_index=b_out, row_range=(r0, r1),
                       local=mine[:r1 - r0])


def relabel_transposed(dv: DistDense1D) -> DistDense1D:
    """Reinterpret ownership on the transposed grid: u on g is v on g^T and
    vice versa.  Pure relabeling; no data moves and block indices stay put."""
    return replace(dv, grid=dv.grid.transpose(),
                   layout="v" if dv.layout == "u" else "u")


def redistribute_u_to_v(u: DistDense1D, ident_t: DistSparse2D,
                        ctx: RankContext) -> DistDense1D:
    """Return a u-layout result to v layout via the transposed-grid identity
    SpMM (zero local flops: identity tiles only move blocks around)."""
    if u.layout != "u":
        raise LayoutError(f"expected a u-layout operand, got {u.layout!r}")
    if ident_t.grid != u.grid.transpose():
        raise LayoutError("identity must live on the transposed grid orientation")
    shuffled = spmm_15d(ident_t, relabel_transposed(u), ctx)
    return relabel_transposed(shuffled)


# ----------------------------------------------------------------------------
# distributed Chebyshev filter
# ----------------------------------------------------------------------------

def dist_chebyshev_filter(a: DistSparse2D, ident_t: DistSparse2D, v: DistDense1D,
                          m: int, bounds: FilterBounds,
                          ctx: RankContext) -> DistDense1D:
    """Degree-m scaled Chebyshev filter on distributed blocks.

    Each degree costs exactly one sparse SpMM plus one identity SpMM (the
    redistribution that brings the product back to v layout), so the scalar
    three-term updates combine same-layout blocks locally.  Scalars and
    update expressions are shared with the sequential filter, making the
    collected result match it to rounding (bit-exactly at p = 1).
    """
    if m < 1:
        raise ValueError("filter degree must be at least 1")
    if v.layout != "v" or v.grid != a.grid:
        raise LayoutError("filter input must be v-layout on the matrix grid")
    with ctx.counters.scope("filter"):
        u = None
        for step in filter_scalars(bounds, m):
            if step[0] == "first":
                _, c, scale = step
                t = redistribute_u_to_v(spmm_15d(a, v, ctx), ident_t, ctx)
                u = replace(t, local=(t.local - c * v.local) * scale)
            else:
                _, c, two_s1_over_e, s_s1 = step
                t = redistribute_u_to_v(spmm_15d(a, u, ctx), ident_t, ctx)
                w = replace(t, local=(t.local - c * u.local) * two_s1_over_e
                            - s_s1 * v.local)
                v, u = u, w
    return u


def filter_collective_counts(m: int) -> dict[str, int]:
    """Closed-form collective tally per rank for one degree-m filter call:
    one allgather + one reduce_scatter per SpMM, two SpMMs per degree."""
    return {"allgather": 2 * m, "reduce_scatter": 2 * m}
