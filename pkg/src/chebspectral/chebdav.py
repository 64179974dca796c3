"""Sequential block Chebyshev-Davidson eigensolver for the smallest eigenpairs.

The solver repeatedly filters a block of vectors through a scaled Chebyshev
polynomial of the operator, augments an orthonormal basis, and extracts Ritz
pairs, locking converged ones at the front.  Inner restarts cap the active
subspace (``act_max``), outer restarts cap the whole basis (``dim_max``),
and supplied initial vectors are consumed block-wise as pairs converge
(progressive filtering).

The small replicated pieces (Rayleigh-quotient update, restart bookkeeping,
deflation decisions) live in standalone helpers so the distributed driver can
run the exact same arithmetic on every rank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from chebspectral.graph import CsrMatrix, is_symmetric, spmm_serial

DEP_TOL = 1e-10          # column declared dependent below this fraction of its norm
_MAX_REPLACE = 5         # attempts to replace a dependent column before giving up


@dataclass(frozen=True)
class FilterBounds:
    """Spectrum bounds steering the filter.

    ``a``/``b`` bound the full spectrum; ``a0`` is the cut below which
    eigenvalues are wanted.  The filter maps [a0, b] into [-1, 1] (damped)
    and [a, a0) outside (amplified), normalized to gain 1 at ``a``.
    """

    a: float
    b: float
    a0: float

    def __post_init__(self):
        if not (self.a < self.a0 < self.b):
            raise ValueError(f"need a < a0 < b, got ({self.a}, {self.a0}, {self.b})")

    @classmethod
    def laplacian_default(cls, k_want: int, n: int) -> "FilterBounds":
        # normalized Laplacian spectrum is [0, 2]; initial cut scales with k/N
        return cls(a=0.0, b=2.0, a0=2.0 * k_want / n)


@dataclass(frozen=True)
class SolverConfig:
    """Solver knobs; ``finalize()`` fills the derived defaults and validates."""

    k_want: int
    k_b: int = 4
    m: int = 11
    act_max: int | None = None
    dim_max: int | None = None
    k_ri: int | None = None
    tol: float = 1e-8
    itmax: int = 500
    seed: int = 0

    def finalize(self, n: int | None = None) -> "SolverConfig":
        """Fill derived defaults (capped at the matrix dimension) and validate."""
        act_max = self.act_max if self.act_max is not None else max(5 * self.k_b, 30)
        dim_max = (self.dim_max if self.dim_max is not None
                   else max(act_max + 2 * self.k_b, self.k_want + 30))
        if n is not None:
            if self.act_max is None:
                act_max = min(act_max, n)
            if self.dim_max is None:
                dim_max = min(dim_max, n)
        act_max = min(act_max, dim_max)
        k_ri = (self.k_ri if self.k_ri is not None
                else min(max(act_max // 2, act_max - 3 * self.k_b),
                         act_max - self.k_b))
        cfg = replace(self, act_max=act_max, dim_max=dim_max, k_ri=k_ri)
        cfg.validate(n)
        return cfg

    def validate(self, n: int | None = None) -> None:
        if self.k_want < 1 or self.k_b < 1:
            raise ValueError("k_want and k_b must be positive")
        if self.m < 2:
            raise ValueError("filter degree m must be at least 2")
        if not (self.k_b <= self.k_ri < self.act_max <= self.dim_max):
            raise ValueError(
                f"need k_b <= k_ri < act_max <= dim_max, got "
                f"k_b={self.k_b}, k_ri={self.k_ri}, act_max={self.act_max}, "
                f"dim_max={self.dim_max}")
        if self.k_ri > self.act_max - self.k_b:
            raise ValueError("k_ri must leave room for a block (k_ri <= act_max - k_b)")
        # keeps the outer-restart width at or above k_b for every k_c < k_want
        if self.dim_max < 3 * self.k_b + self.k_want - 1:
            raise ValueError(
                f"dim_max={self.dim_max} too small for k_b={self.k_b}, "
                f"k_want={self.k_want} (need at least 3*k_b + k_want - 1)")
        if n is not None:
            if self.k_want >= n:
                raise ValueError("k_want must be smaller than the matrix dimension")
            if self.dim_max > n:
                raise ValueError(
                    f"dim_max={self.dim_max} exceeds the matrix dimension {n}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass
class EigResult:
    values: np.ndarray     # ascending
    vectors: np.ndarray    # N x len(values), orthonormal columns
    iterations: int
    converged: bool
    residuals: np.ndarray  # ||A v - lambda v||_2 per returned pair


# ----------------------------------------------------------------------------
# Chebyshev filter
# ----------------------------------------------------------------------------

def cheb_scalar(m: int, x: float) -> float:
    """Degree-m Chebyshev polynomial via the cos/cosh branches."""
    if m < 0:
        raise ValueError("degree must be non-negative")
    if abs(x) <= 1.0:
        return math.cos(m * math.acos(x))
    if x > 1.0:
        return math.cosh(m * math.acosh(x))
    return (-1.0 if m % 2 else 1.0) * math.cosh(m * math.acosh(-x))


def filter_scalars(bounds: FilterBounds, m: int):
    """Scalar schedule of the three-term recurrence, shared by both drivers.

    Yields ``("first", c, scale)`` for the degree-1 seed and then
    ``("next", c, two_s1_over_e, s_s1)`` for each remaining degree.
    """
    cut, up, bottom = bounds.a0, bounds.b, bounds.a
    c = (cut + up) / 2.0
    e = (up - cut) / 2.0
    sigma = e / (bottom - c)
    tau = 2.0 / sigma
    yield ("first", c, sigma / e)
    s = sigma
    for _ in range(m - 1):
        s1 = 1.0 / (tau - s)
        yield ("next", c, 2.0 * s1 / e, s * s1)
        s = s1


def chebyshev_filter(a_mat: CsrMatrix, v: np.ndarray, bounds: FilterBounds,
                     m: int) -> np.ndarray:
    """Apply the degree-m scaled Chebyshev filter of the operator to a block.

    Eigendirections below ``bounds.a0`` come out amplified (gain 1 at
    ``bounds.a``, growing like the polynomial outside [-1, 1]); the rest of
    the spectrum is damped into [-1, 1].  ``m == 1`` reduces to the seed
    formula alone.
    """
    if m < 1:
        raise ValueError("filter degree must be at least 1")
    v = np.asarray(v, dtype=np.float64)
    u = None
    for step in filter_scalars(bounds, m):
        if step[0] == "first":
            _, c, scale = step
            u = (spmm_serial(a_mat, v) - c * v) * scale
        else:
            _, c, two_s1_over_e, s_s1 = step
            w = (spmm_serial(a_mat, u) - c * u) * two_s1_over_e - s_s1 * v
            v, u = u, w
    return u


# ----------------------------------------------------------------------------
# orthonormalization
# ----------------------------------------------------------------------------

def qr_posdiag(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR with the R diagonal forced non-negative (unique for full rank)."""
    q, r = np.linalg.qr(x, mode="reduced")
    s = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    return q * s, r * s[:, None]


def _col_norms_sq(x: np.ndarray) -> np.ndarray:
    return np.sum(x * x, axis=0)


def dgks_orthonormalize(v_new: np.ndarray, v_locked: np.ndarray | None = None,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Column-by-column Gram-Schmidt with reorthogonalization.

    Each column is projected twice against the locked basis plus the columns
    accepted so far; a column that collapses below ``DEP_TOL`` of its original
    norm is replaced by a random vector and re-orthonormalized.
    """
    if rng is None:
        rng = np.random.Generator(np.random.Philox(0))
    v_new = np.array(v_new, dtype=np.float64)
    n = v_new.shape[0]
    locked = [] if v_locked is None or v_locked.size == 0 else [np.asarray(v_locked)]
    accepted: list[np.ndarray] = []

    def project(x):
        for block in locked + accepted:
            x = x - block @ (block.T @ x) if block.ndim == 2 else x - block * (block @ x)
        return x

    for j in range(v_new.shape[1]):
        x = v_new[:, j]
        for attempt in range(_MAX_REPLACE + 1):
            orig = math.sqrt(float(x @ x))
            y = project(project(x))
            nrm = math.sqrt(float(y @ y))
            if orig > 0.0 and nrm > DEP_TOL * orig:
                accepted.append(y / nrm)
                break
            x = rng.uniform(-1.0, 1.0, n)
        else:
            raise np.linalg.LinAlgError("could not replace a dependent column")
    return np.column_stack(accepted)


def block_orthonormalize(v_new: np.ndarray, v_locked: np.ndarray | None = None,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Two-pass block projection against the locked basis, then one QR.

    Serial twin of the distributed orthonormalization: same pass structure,
    same dependency rule (R diagonal against the pre-projection column norm),
    same replacement policy.
    """
    if rng is None:
        rng = np.random.Generator(np.random.Philox(0))
    x = np.array(v_new, dtype=np.float64)
    locked = None if v_locked is None or v_locked.size == 0 else np.asarray(v_locked)
    pre = np.sqrt(_col_norms_sq(x))
    for _ in range(_MAX_REPLACE + 1):
        y = x
        if locked is not None:
            for _pass in range(2):
                y = y - locked @ (locked.T @ y)
        q, r = qr_posdiag(y)
        # relative to each column's own pre-projection norm (filtered blocks
        # can be legitimately tiny); an exactly zero column is dependent
        dep = np.abs(np.diag(r)) <= DEP_TOL * pre
        if not dep.any():
            return q
        for j in np.nonzero(dep)[0]:
            x[:, j] = rng.uniform(-1.0, 1.0, x.shape[0])
        pre = np.sqrt(_col_norms_sq(x))
    raise np.linalg.LinAlgError("could not replace dependent columns")


# ----------------------------------------------------------------------------
# replicated small-matrix arithmetic (shared with the distributed driver)
# ----------------------------------------------------------------------------

def update_h_and_solve(h_buf: np.ndarray, k_act: int, k_b: int,
                       prod: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Write the trailing k_b columns of H, symmetrize, and eigendecompose.

    ``prod`` is (active basis)^T (A . new block), shape (k_act, k_b).  Returns
    the Ritz values ascending and the rotation Y.
    """
    lead = k_act - k_b
    h_buf[:k_act, lead:k_act] = prod
    h_buf[lead:k_act, :lead] = prod[:lead].T
    corner = prod[lead:k_act]
    h_buf[lead:k_act, lead:k_act] = 0.5 * (corner + corner.T)
    active = h_buf[:k_act, :k_act]
    if not np.all(np.isfinite(active)):
        raise np.linalg.LinAlgError("Rayleigh-quotient matrix corrupted (non-finite)")
    d, y = np.linalg.eigh(active)
    return d, y


def apply_inner_restart(k_act: int, k_c: int, cfg: SolverConfig) -> tuple[int, int]:
    """If the active space would overflow act_max, shrink it to k_ri."""
    if k_act + cfg.k_b > cfg.act_max:
        k_act = cfg.k_ri
    return k_act, k_act + k_c


def apply_outer_restart(k_sub: int, k_act: int, k_c: int,
                        cfg: SolverConfig) -> tuple[int, int]:
    """If the basis would overflow dim_max, shrink it to k_c + k_ro."""
    if k_sub + cfg.k_b > cfg.dim_max:
        k_ro = cfg.dim_max - 2 * cfg.k_b - k_c
        if k_ro < cfg.k_b:
            raise RuntimeError(f"outer restart width collapsed (k_ro={k_ro})")
        return k_c + k_ro, k_ro
    return k_sub, k_act


def prefix_converged(norms: np.ndarray, tol: float) -> int:
    """Count of leading residual columns at or below tol (locking is contiguous)."""
    e_c = 0
    for nrm in norms:
        if nrm <= tol:
            e_c += 1
        else:
            break
    return e_c


def next_filter_cut(d: np.ndarray, e_c: int, bounds: FilterBounds,
                    prev: float) -> float:
    """Median of the non-converged Ritz values, clamped inside (a, b)."""
    vals = d[e_c:]
    if vals.size == 0:
        return prev
    med = float(np.median(vals))
    margin = 1e-8 * (bounds.b - bounds.a)
    return min(max(med, bounds.a + margin), bounds.b - margin)


# ----------------------------------------------------------------------------
# solver state and per-step operations
# ----------------------------------------------------------------------------

@dataclass
class SolverState:
    """Basis, products, projected matrix, and the three counters.

    ``k_c + k_act == k_sub`` always; V's first k_c columns are locked
    eigenvector approximations sorted by eigenvalue.
    """

    cfg: SolverConfig
    n: int
    V: np.ndarray            # (n, dim_max)
    W: np.ndarray            # (n, act_max), A times the active basis
    H: np.ndarray            # (act_max, act_max) buffer
    k_c: int = 0
    k_sub: int = 0
    k_act: int = 0
    k_i: int = 0
    locked_vals: np.ndarray = None
    # transient per-iteration pieces
    ritz: np.ndarray | None = None
    rot: np.ndarray | None = None
    k_old: int = 0

    def __post_init__(self):
        if self.locked_vals is None:
            self.locked_vals = np.empty(0, dtype=np.float64)

    @classmethod
    def fresh(cls, n: int, cfg: SolverConfig) -> "SolverState":
        return cls(cfg=cfg, n=n,
                   V=np.zeros((n, cfg.dim_max)),
                   W=np.zeros((n, cfg.act_max)),
                   H=np.zeros((cfg.act_max, cfg.act_max)))


def rayleigh_ritz_update(state: SolverState, a_mat: CsrMatrix) -> SolverState:
    """Extend W by A times the freshly appended block, update H, eigendecompose.

    The new block must already sit in ``V[:, k_sub:k_sub+k_b]``, orthonormal
    against the rest of the basis.
    """
    cfg = state.cfg
    new_block = np.ascontiguousarray(state.V[:, state.k_sub:state.k_sub + cfg.k_b])
    w_new = spmm_serial(a_mat, new_block)
    state.W[:, state.k_act:state.k_act + cfg.k_b] = w_new
    state.k_act += cfg.k_b
    state.k_sub += cfg.k_b
    active = state.V[:, state.k_c:state.k_sub]
    prod = active.T @ w_new
    state.ritz, state.rot = update_h_and_solve(state.H, state.k_act, cfg.k_b, prod)
    state.k_old = state.k_act
    return state


def inner_restart(state: SolverState) -> SolverState:
    state.k_act, state.k_sub = apply_inner_restart(state.k_act, state.k_c, state.cfg)
    return state


def outer_restart(state: SolverState) -> SolverState:
    state.k_sub, state.k_act = apply_outer_restart(state.k_sub, state.k_act,
                                                   state.k_c, state.cfg)
    return state


def subspace_rotate(state: SolverState) -> SolverState:
    """Rotate the active basis (and W) onto the Ritz vectors, truncating to k_act."""
    y = state.rot[:, :state.k_act]
    kc, ko = state.k_c, state.k_old
    state.V[:, kc:kc + state.k_act] = state.V[:, kc:kc + ko] @ y
    state.W[:, :state.k_act] = state.W[:, :ko] @ y
    return state


def apply_deflation(state: SolverState, norms: np.ndarray,
                    tol: float) -> tuple[SolverState, int]:
    """Lock the converged prefix given residual norms; shared bookkeeping.

    Column moves are row-wise, so the same code runs on full matrices
    (sequential) and on per-rank row blocks (distributed).
    """
    e_c = prefix_converged(norms, tol)
    if e_c:
        state.locked_vals = np.concatenate([state.locked_vals, state.ritz[:e_c]])
        state.k_c += e_c
        order = np.argsort(state.locked_vals, kind="stable")
        state.locked_vals = state.locked_vals[order]
        state.V[:, :state.k_c] = state.V[:, :state.k_c][:, order]
        state.W[:, :state.k_act - e_c] = state.W[:, e_c:state.k_act].copy()
        state.k_act -= e_c
    state.H[:] = 0.0
    np.fill_diagonal(state.H[:state.k_act, :state.k_act],
                     state.ritz[e_c:e_c + state.k_act])
    return state, e_c


def residual_deflate(state: SolverState, a_mat: CsrMatrix,
                     tol: float) -> tuple[SolverState, int]:
    """Test the leading k_b Ritz pairs, lock the converged prefix, reset H.

    Locked columns are kept sorted by eigenvalue (stable, so earlier locks win
    ties); W is shifted left past the newly locked columns and H becomes the
    diagonal of the surviving Ritz values.
    """
    k_b = state.cfg.k_b
    front = np.ascontiguousarray(state.V[:, state.k_c:state.k_c + k_b])
    resid = spmm_serial(a_mat, front) - front * state.ritz[:k_b]
    norms = np.sqrt(np.sum(resid * resid, axis=0))
    return apply_deflation(state, norms, tol)


# ----------------------------------------------------------------------------
# driver
# ----------------------------------------------------------------------------

def _initial_block(n: int, k_b: int, v_init: np.ndarray | None,
                   rng: np.random.Generator, ortho_fn) -> tuple[np.ndarray, int, int]:
    """First filter input: leading initials, random fill, per the startup rule."""
    k_init = 0 if v_init is None else v_init.shape[1]
    take = min(k_b, k_init)
    if take == 0:
        block = ortho_fn(rng.uniform(-1.0, 1.0, (n, k_b)), None, rng)
    elif take == k_b:
        block = np.array(v_init[:, :k_b], dtype=np.float64)
    else:
        fill = rng.uniform(-1.0, 1.0, (n, k_b - take))
        block = np.column_stack([v_init[:, :take], fill])
    return block, take, k_init


def progressive_block(state: SolverState, v_init: np.ndarray | None, k_init: int,
                      e_c: int, rng: np.random.Generator,
                      draw=None) -> np.ndarray:
    """Next filter input: unused initials first, then the best active Ritz vectors.

    ``draw(count)`` supplies random fill columns; the distributed driver
    injects a version that draws full-height vectors (keeping every rank's
    stream aligned) and slices its own rows.
    """
    cfg = state.cfg
    if draw is None:
        draw = lambda fill: rng.uniform(-1.0, 1.0, (state.n, fill))  # noqa: E731
    avail = max(k_init - state.k_i, 0)
    t = min(e_c, avail)
    parts = []
    if t:
        parts.append(v_init[:, state.k_i:state.k_i + t])
        state.k_i += t
    n_active = min(cfg.k_b - t, state.k_act)
    if n_active:
        parts.append(state.V[:, state.k_c:state.k_c + n_active].copy())
    fill = cfg.k_b - t - n_active
    if fill:  # degenerate corner: fewer active vectors than the block needs
        parts.append(draw(fill))
    return np.column_stack(parts)


def bchdav_solve(a_mat: CsrMatrix, cfg: SolverConfig,
                 v_init: np.ndarray | None = None,
                 bounds: FilterBounds | None = None,
                 ortho: str = "dgks",
                 monitor=None) -> EigResult:
    """Compute the k_want smallest eigenpairs of a sparse symmetric matrix.

    ``v_init`` columns (assumed ordered by Rayleigh quotient) are consumed
    progressively; ``bounds`` defaults to the normalized-Laplacian spectrum.
    ``ortho`` selects the basis-extension orthonormalization: ``dgks``
    (column-wise, the default) or ``blockqr`` (two-pass block projection plus
    QR, matching the distributed driver's arithmetic).

    Returns partial results with ``converged=False`` when itmax runs out.
    """
    n = a_mat.n
    cfg = cfg.finalize(n)
    if not is_symmetric(a_mat):
        raise ValueError("input matrix must be symmetric")
    if bounds is None:
        bounds = FilterBounds.laplacian_default(cfg.k_want, n)
    ortho_fn = {"dgks": dgks_orthonormalize, "blockqr": block_orthonormalize}[ortho]

    rng = np.random.Generator(np.random.Philox(cfg.seed))
    state = SolverState.fresh(n, cfg)
    v_tmp, state.k_i, k_init = _initial_block(n, cfg.k_b, v_init, rng, ortho_fn)
    low_nwb = bounds.a0

    iterations = 0
    converged = False
    for iterations in range(1, cfg.itmax + 1):
        it_bounds = FilterBounds(bounds.a, bounds.b, low_nwb)
        filtered = chebyshev_filter(a_mat, v_tmp, it_bounds, cfg.m)
        basis = state.V[:, :state.k_sub] if state.k_sub else None
        state.V[:, state.k_sub:state.k_sub + cfg.k_b] = ortho_fn(filtered, basis, rng)
        rayleigh_ritz_update(state, a_mat)
        inner_restart(state)
        subspace_rotate(state)
        state, e_c = residual_deflate(state, a_mat, cfg.tol)
        if monitor is not None:  # diagnostics hook (invariant checks in tests)
            monitor(state, iterations)
        if state.k_c >= cfg.k_want:
            converged = True
            break
        outer_restart(state)
        v_tmp = progressive_block(state, v_init, k_init, e_c, rng)
        low_nwb = next_filter_cut(state.ritz, e_c, bounds, low_nwb)

    k_out = min(state.k_c, cfg.k_want)
    values = state.locked_vals[:k_out].copy()
    vectors = state.V[:, :k_out].copy()
    resid = (spmm_serial(a_mat, vectors) - vectors * values) if k_out else \
        np.zeros((n, 0))
    residuals = np.sqrt(np.sum(resid * resid, axis=0))
    return EigResult(values=values, vectors=vectors, iterations=iterations,
                     converged=converged, residuals=residuals)
