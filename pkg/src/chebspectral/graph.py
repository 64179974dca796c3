"""Graph ingestion, CSR storage, normalized Laplacian, and synthetic block-model graphs.

Conventions shared by the whole package:

* edge lists are undirected, 0-based, canonicalized to ``u < v`` and sorted;
* CSR column indices are strictly increasing within each row, so equal
  matrices compare bit-exactly;
* row/block splits hand the remainder to the leading blocks
  (``block_ranges``), and 2D tiles are unions of those 1D blocks, which keeps
  the distributed layouts aligned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from chebspectral import kernels


class GraphFormatError(ValueError):
    """Raised for malformed edge-list input; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class EdgeList:
    """Canonical undirected edge list: unique ``u < v`` pairs, lexicographically sorted."""

    n_nodes: int
    edges: np.ndarray  # (E, 2) int64

    @classmethod
    def from_pairs(cls, n_nodes: int, pairs, *, line_of=None) -> "EdgeList":
        """Canonicalize raw (u, v) pairs: orient, dedupe, sort, validate range."""
        arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        if arr.size:
            lo = np.minimum(arr[:, 0], arr[:, 1])
            hi = np.maximum(arr[:, 0], arr[:, 1])
            arr = np.unique(np.column_stack([lo, hi]), axis=0)
            if arr[0, 0] < 0 or arr.max() >= n_nodes:
                raise GraphFormatError(
                    f"edge index out of range for {n_nodes} nodes")
        return cls(n_nodes=int(n_nodes), edges=arr)

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def degrees(self) -> np.ndarray:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        if self.edges.size:
            d += np.bincount(self.edges[:, 0], minlength=self.n_nodes)
            d += np.bincount(self.edges[:, 1], minlength=self.n_nodes)
        return d


@dataclass(frozen=True)
class CsrMatrix:
    """Sparse matrix in compressed-row form with sorted, unique columns per row."""

    n: int
    row_ptr: np.ndarray   # (n+1,) int64, non-decreasing
    col_idx: np.ndarray   # (nnz,) int64, strictly increasing within each row
    values: np.ndarray    # (nnz,) float64

    @property
    def nnz(self) -> int:
        return self.col_idx.shape[0]

    @classmethod
    def from_coo(cls, n: int, rows, cols, vals) -> "CsrMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size:
            dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if dup.any():
                raise ValueError("duplicate entries in COO input")
        row_ptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(row_ptr, rows + 1, 1)
        np.cumsum(row_ptr, out=row_ptr)
        return cls(n=int(n), row_ptr=row_ptr, col_idx=cols, values=vals)

    @classmethod
    def from_dense(cls, dense: np.ndarray, tol: float = 0.0) -> "CsrMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        rows, cols = np.nonzero(np.abs(dense) > tol)
        return cls.from_coo(dense.shape[0], rows, cols, dense[rows, cols])

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        idx = np.arange(n, dtype=np.int64)
        return cls(n=n, row_ptr=np.arange(n + 1, dtype=np.int64),
                   col_idx=idx, values=np.ones(n))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        for i in range(self.n):
            s, e = self.row_ptr[i], self.row_ptr[i + 1]
            out[i, self.col_idx[s:e]] = self.values[s:e]
        return out

    def row_slice(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.row_ptr[i], self.row_ptr[i + 1]
        return self.col_idx[s:e], self.values[s:e]


def is_symmetric(a: CsrMatrix) -> bool:
    """Exact structural + value symmetry check."""
    rows = np.repeat(np.arange(a.n, dtype=np.int64), np.diff(a.row_ptr))
    fwd = np.lexsort((a.col_idx, rows))
    rev = np.lexsort((rows, a.col_idx))
    return (np.array_equal(rows[fwd], a.col_idx[rev])
            and np.array_equal(a.col_idx[fwd], rows[rev])
            and np.array_equal(a.values[fwd], a.values[rev]))


def csr_equal(a: CsrMatrix, b: CsrMatrix) -> bool:
    """Bit-exact equality (canonical CSR makes this well defined)."""
    return (a.n == b.n
            and np.array_equal(a.row_ptr, b.row_ptr)
            and np.array_equal(a.col_idx, b.col_idx)
            and np.array_equal(a.values, b.values))


# ----------------------------------------------------------------------------
# loading / saving
# ----------------------------------------------------------------------------

def load_edge_list(path, format: str = "tsv") -> EdgeList:
    """Load an undirected edge list from a TSV file or a Matrix Market file.

    TSV: one ``u v`` (or ``u<TAB>v``) edge per line, ``#`` comments, optional
    ``%N <count>`` header declaring the node count.  Matrix Market:
    ``coordinate pattern symmetric`` or ``coordinate real symmetric``,
    1-based indices.  Self-loops are rejected in both formats.
    """
    if format == "tsv":
        return _load_tsv(path)
    if format in ("mm", "matrix-market"):
        return _load_matrix_market(path)
    raise ValueError(f"unknown edge-list format {format!r}")


def _load_tsv(path) -> EdgeList:
    declared_n = None
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("%N"):
                try:
                    declared_n = int(line.split()[1])
                except (IndexError, ValueError):
                    raise GraphFormatError("malformed %N header", lineno) from None
                continue
            tokens = line.split()
            if len(tokens) != 2:
                raise GraphFormatError(f"expected two indices, got {line!r}", lineno)
            try:
                u, v = int(tokens[0]), int(tokens[1])
            except ValueError:
                raise GraphFormatError(f"non-integer index in {line!r}", lineno) from None
            if u < 0 or v < 0:
                raise GraphFormatError(f"negative index in {line!r}", lineno)
            if u == v:
                raise GraphFormatError(f"self-loop at node {u}", lineno)
            if declared_n is not None and max(u, v) >= declared_n:
                raise GraphFormatError(
                    f"index {max(u, v)} out of range for declared %N {declared_n}", lineno)
            pairs.append((u, v))
    n = declared_n if declared_n is not None else (
        1 + max((max(p) for p in pairs), default=-1))
    return EdgeList.from_pairs(n, pairs)


def _load_matrix_market(path) -> EdgeList:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        lineno = 1
        fields = header.lower().split()
        if (len(fields) != 5 or fields[0] != "%%matrixmarket"
                or fields[1] != "matrix" or fields[2] != "coordinate"):
            raise GraphFormatError("not a MatrixMarket coordinate header", 1)
        if fields[3] not in ("pattern", "real") or fields[4] != "symmetric":
            raise GraphFormatError(
                f"unsupported MatrixMarket qualifiers {fields[3]} {fields[4]} "
                "(need 'pattern symmetric' or 'real symmetric')", 1)
        pattern = fields[3] == "pattern"
        dims = None
        pairs = []
        for raw in fh:
            lineno += 1
            line = raw.strip()
            if not line or line.startswith("%"):
                continue
            tokens = line.split()
            if dims is None:
                if len(tokens) != 3:
                    raise GraphFormatError("malformed size line", lineno)
                nr, nc, _ = (int(t) for t in tokens)
                if nr != nc:
                    raise GraphFormatError("matrix must be square", lineno)
                dims = nr
                continue
            want = 2 if pattern else 3
            if len(tokens) != want:
                raise GraphFormatError(f"expected {want} fields, got {line!r}", lineno)
            i, j = int(tokens[0]) - 1, int(tokens[1]) - 1
            if not pattern and float(tokens[2]) == 0.0:
                continue  # explicit zero: no edge
            if i < 0 or j < 0 or i >= dims or j >= dims:
                raise GraphFormatError(f"index out of range in {line!r}", lineno)
            if i == j:
                raise GraphFormatError(f"self-loop at node {i}", lineno)
            pairs.append((i, j))
        if dims is None:
            raise GraphFormatError("missing size line")
    return EdgeList.from_pairs(dims, pairs)


def save_edge_list(g: EdgeList, path, format: str = "tsv") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if format == "tsv":
            fh.write(f"%N {g.n_nodes}\n")
            for u, v in g.edges:
                fh.write(f"{u}\t{v}\n")
        elif format in ("mm", "matrix-market"):
            fh.write("%%MatrixMarket matrix coordinate pattern symmetric\n")
            fh.write(f"{g.n_nodes} {g.n_nodes} {g.n_edges}\n")
            for u, v in g.edges:
                # store the lower triangle, 1-based
                fh.write(f"{v + 1} {u + 1}\n")
        else:
            raise ValueError(f"unknown edge-list format {format!r}")


# ----------------------------------------------------------------------------
# operators
# ----------------------------------------------------------------------------

def normalized_laplacian(g: EdgeList) -> CsrMatrix:
    """Symmetric normalized Laplacian of an unweighted undirected graph.

    Unit diagonal, ``-1/sqrt(d_u d_v)`` per edge.  Isolated nodes get a plain
    identity row, which keeps the matrix symmetric with spectrum in [0, 2].
    """
    d = g.degrees().astype(np.float64)
    diag = np.arange(g.n_nodes, dtype=np.int64)
    rows = [diag, ]
    cols = [diag, ]
    vals = [np.ones(g.n_nodes), ]
    if g.n_edges:
        u, v = g.edges[:, 0], g.edges[:, 1]
        w = -1.0 / np.sqrt(d[u] * d[v])
        rows.extend([u, v])
        cols.extend([v, u])
        vals.extend([w, w])
    return CsrMatrix.from_coo(g.n_nodes, np.concatenate(rows),
                              np.concatenate(cols), np.concatenate(vals))


def spmm_serial(a: CsrMatrix, v: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Exact CSR times dense-block product; the oracle for every distributed SpMM."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] != a.n:
        raise ValueError(f"dimension mismatch: matrix is {a.n}x{a.n}, block is {v.shape}")
    return kernels.csr_matmul(a.n, a.row_ptr, a.col_idx, a.values, v, backend=backend)


def gen_sbm(n_nodes: int, n_blocks: int, p_in: float, p_out: float, seed: int):
    """Planted-partition random graph with counter-based RNG (reproducible anywhere).

    Nodes are assigned to blocks round-robin (``label = node % n_blocks``);
    each unordered pair is sampled exactly once from a single Philox stream
    in canonical (u < v) order.  Returns ``(EdgeList, Partition)`` with the
    ground-truth labels.
    """
    from chebspectral.clustering import Partition

    if not (0.0 <= p_out < p_in <= 1.0):
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if n_blocks < 1 or n_blocks > n_nodes:
        raise ValueError("n_blocks must be in [1, n_nodes]")
    labels = np.arange(n_nodes, dtype=np.int64) % n_blocks
    rng = np.random.Generator(np.random.Philox(seed))
    chunks = []
    for u in range(n_nodes - 1):
        vs = np.arange(u + 1, n_nodes, dtype=np.int64)
        thresh = np.where(labels[vs] == labels[u], p_in, p_out)
        hit = rng.random(vs.size) < thresh
        if hit.any():
            nbrs = vs[hit]
            chunks.append(np.column_stack([np.full(nbrs.size, u, dtype=np.int64), nbrs]))
    edges = (np.concatenate(chunks) if chunks
             else np.empty((0, 2), dtype=np.int64))
    return EdgeList(n_nodes=n_nodes, edges=edges), Partition(labels=labels,
                                                             n_clusters=n_blocks)


def block_ranges(n: int, parts: int) -> list[tuple[int, int]]:
    """1D row split: the first ``n % parts`` blocks get the extra row."""
    base, rem = divmod(n, parts)
    ranges = []
    start = 0
    for b in range(parts):
        size = base + (1 if b < rem else 0)
        ranges.append((start, start + size))
        start += size
    return ranges


def tile_ranges(n: int, q: int) -> list[tuple[int, int]]:
    """2D tile boundaries: unions of q consecutive 1D blocks, so a q x q tiling
    stays aligned with the q**2-way 1D block split used for dense rows."""
    blocks = block_ranges(n, q * q)
    return [(blocks[i * q][0], blocks[i * q + q - 1][1]) for i in range(q)]


def csr_tile(a: CsrMatrix, row_range: tuple[int, int],
             col_range: tuple[int, int]) -> CsrMatrix:
    """Extract the submatrix a[r0:r1, c0:c1] with shifted local indices."""
    r0, r1 = row_range
    c0, c1 = col_range
    ptr = np.zeros(r1 - r0 + 1, dtype=np.int64)
    cols = []
    vals = []
    for i in range(r0, r1):
        ci, vi = a.row_slice(i)
        lo = np.searchsorted(ci, c0, side="left")
        hi = np.searchsorted(ci, c1, side="left")
        ptr[i - r0 + 1] = ptr[i - r0] + (hi - lo)
        cols.append(ci[lo:hi] - c0)
        vals.append(vi[lo:hi])
    col_idx = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
    values = np.concatenate(vals) if vals else np.empty(0, dtype=np.float64)
    return CsrMatrix(n=r1 - r0, row_ptr=ptr, col_idx=col_idx.astype(np.int64),
                     values=values.astype(np.float64))


def load_imbalance(a: CsrMatrix, grid_q: int) -> float:
    """p * max tile nnz / total nnz for the q x q 2D tiling (p = q**2)."""
    if a.nnz == 0:
        raise ValueError("load imbalance undefined for an empty matrix")
    ranges = tile_ranges(a.n, grid_q)
    rows = np.repeat(np.arange(a.n, dtype=np.int64), np.diff(a.row_ptr))
    row_starts = np.array([r[0] for r in ranges] + [a.n], dtype=np.int64)
    tile_i = np.searchsorted(row_starts, rows, side="right") - 1
    tile_j = np.searchsorted(row_starts, a.col_idx, side="right") - 1
    counts = np.zeros((grid_q, grid_q), dtype=np.int64)
    np.add.at(counts, (tile_i, tile_j), 1)
    return float(grid_q * grid_q * counts.max() / a.nnz)
