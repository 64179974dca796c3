"""Tree-based tall-skinny QR over 1D row blocks, plus block orthonormalization.

Each rank factors its row block, then climbs a perfect base-b tree: at every
level the b ranks holding the R factors of sibling subtrees allgather them,
stack them in subtree order, and refactor.  Running the exchange as a
butterfly (every rank participates at every level, one allgather per level)
leaves the final R replicated everywhere and every rank holding the whole
chain of intermediate Q factors for its own rows, so the explicit Q is formed
locally with zero communication.

Local QRs force a non-negative R diagonal, making the distributed R unique
and directly comparable with a reference factorization.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from chebspectral.chebdav import DEP_TOL, _MAX_REPLACE, qr_posdiag
from chebspectral.dist_spmm import DistDense1D
from chebspectral.procgrid import RankContext


def distribute_rows_1d(v: np.ndarray, p: int, rank: int) -> DistDense1D:
    """Plain 1D row-block view for gridless rank sets (rank r owns block r)."""
    v = np.asarray(v, dtype=np.float64)
    from chebspectral.graph import block_ranges
    r0, r1 = block_ranges(v.shape[0], p)[rank]
    return DistDense1D(grid=None, layout="v", global_n=v.shape[0],
                       cols=v.shape[1], block_index=rank, row_range=(r0, r1),
                       local=v[r0:r1].copy())


def tree_base(p: int, branching: int | None = None) -> tuple[int, int]:
    """(base, height) of the reduction tree; the tree must be perfect.

    Binary by default; when p is not a power of two the smallest base with
    p = base**height is used (e.g. 3 for p = 9).
    """
    if p == 1:
        return (branching or 2), 0
    candidates = [branching] if branching else range(2, p + 1)
    for b in candidates:
        height = 0
        total = 1
        while total < p:
            total *= b
            height += 1
        if total == p:
            return b, height
    raise ValueError(f"no perfect tree with branching {branching} over {p} ranks")


@dataclass
class TsqrTree:
    """Per-rank factorization record: leaf Q, one (Q, slot) pair per level,
    and the replicated final R."""

    rank: int
    cols: int
    block_rows: int           # true rows of this rank's block (before padding)
    leaf_q: np.ndarray        # (padded rows, cols)
    levels: list              # [(stacked Q factor (b*cols, cols), slot index)]
    r: np.ndarray             # (cols, cols) upper triangular, replicated
    meta: DistDense1D         # ownership info of the input block


def _leaf_qr(x: np.ndarray, cols: int, sign_fix: bool) -> tuple[np.ndarray, np.ndarray]:
    if x.shape[0] < cols:  # pad short leaves; padding never leaves the leaf
        padded = np.zeros((cols, x.shape[1]))
        padded[:x.shape[0]] = x
        x = padded
    return qr_posdiag(x) if sign_fix else np.linalg.qr(x, mode="reduced")


def tsqr_factor(v: DistDense1D, ctx: RankContext, branching: int | None = None,
                _skip_sign_fix: bool = False) -> TsqrTree:
    """Factor a distributed tall-skinny matrix; R lands replicated on all ranks.

    Exactly one allgather per tree level.  ``_skip_sign_fix`` disables the
    R-sign convention (fault-injection hook for the verification suite).
    """
    p = ctx.size
    base, height = tree_base(p, branching)
    cols = v.cols
    sign_fix = not _skip_sign_fix
    leaf_q, r = _leaf_qr(np.asarray(v.local, dtype=np.float64), cols, sign_fix)
    levels = []
    rank = ctx.rank
    for k in range(1, height + 1):
        stride = base ** (k - 1)
        slot = (rank // stride) % base
        group = tuple(rank + (j - slot) * stride for j in range(base))
        stacked = ctx.allgather(group, r)
        c = np.vstack(stacked)
        qk, r = qr_posdiag(c) if sign_fix else np.linalg.qr(c, mode="reduced")
        levels.append((qk, slot))
    return TsqrTree(rank=rank, cols=cols, block_rows=v.local.shape[0],
                    leaf_q=leaf_q, levels=levels, r=r, meta=v)


def tsqr_form_q(tree: TsqrTree, ctx: RankContext | None = None) -> DistDense1D:
    """Explicit distributed Q from the stored factors; no communication.

    Multiplies this rank's slot slice of each level's Q factor top-down, then
    applies the leaf Q and drops any leaf padding.
    """
    n = tree.cols
    s = None
    for qk, slot in reversed(tree.levels):
        piece = qk[slot * n:(slot + 1) * n, :]
        s = piece if s is None else piece @ s
    local_q = tree.leaf_q if s is None else tree.leaf_q @ s
    local_q = np.ascontiguousarray(local_q[:tree.block_rows])
    return replace(tree.meta, local=local_q)


def ortho_block_against(v_new: DistDense1D, v_locked: DistDense1D | None,
                        ctx: RankContext, rng: np.random.Generator | None = None,
                        branching: int | None = None) -> DistDense1D:
    """Orthonormalize a distributed block against a locked distributed basis.

    Two passes of block projection (local Gram products summed by one
    allreduce each) followed by an internal TSQR.  Columns whose R diagonal
    collapses below ``DEP_TOL`` of their pre-projection norm are replaced by
    replicated random vectors and the whole pass repeats, with bounded
    retries.  Mirrors the sequential block orthonormalization arithmetic
    exactly (bit-for-bit at p = 1).
    """
    if rng is None:
        rng = np.random.Generator(np.random.Philox(0))
    comm = tuple(range(ctx.size))
    locked = None
    if v_locked is not None and v_locked.cols:
        if v_locked.layout != v_new.layout or v_locked.grid != v_new.grid:
            raise ValueError("locked basis must share the new block's layout")
        locked = v_locked.local
    x = np.array(v_new.local, dtype=np.float64)
    pre = np.sqrt(ctx.allreduce(comm, np.sum(x * x, axis=0)))
    r0, r1 = v_new.row_range
    for _ in range(_MAX_REPLACE + 1):
        y = x
        if locked is not None:
            for _pass in range(2):
                g = ctx.allreduce(comm, locked.T @ y)
                y = y - locked @ g
        tree = tsqr_factor(replace(v_new, local=y), ctx, branching=branching)
        dep = np.abs(np.diag(tree.r)) <= DEP_TOL * pre
        if not dep.any():
            return tsqr_form_q(tree)
        for j in np.nonzero(dep)[0]:
            x[:, j] = rng.uniform(-1.0, 1.0, v_new.global_n)[r0:r1]
        pre = np.sqrt(ctx.allreduce(comm, np.sum(x * x, axis=0)))
    raise np.linalg.LinAlgError("could not replace dependent columns")
