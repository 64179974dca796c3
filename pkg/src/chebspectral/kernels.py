"""CSR kernel dispatch: compiled extension when available, numpy fallback otherwise.

The backend is chosen once at import. ``CHEBSPECTRAL_KERNEL`` overrides the
choice (``auto``, ``compiled``, ``python``); the benchmark runs both.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from chebspectral import _spmm_c

    _COMPILED = _spmm_c.csr_matmul
except ImportError:
    _COMPILED = None


def _csr_matmul_py(row_ptr: np.ndarray, col_idx: np.ndarray, values: np.ndarray,
                   dense: np.ndarray, out: np.ndarray) -> None:
    if values.size == 0:
        return
    n = row_ptr.shape[0] - 1
    contrib = values[:, None] * dense[col_idx, :]
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(row_ptr))
    # bincount accumulates in entry order (CSR index order), so the fallback
    # sums each row exactly like the compiled loop, bit for bit.
    for j in range(contrib.shape[1]):
        out[:, j] += np.bincount(rows, weights=contrib[:, j], minlength=n)


def _csr_matmul_c(row_ptr, col_idx, values, dense, out):
    _COMPILED(row_ptr, col_idx, values, dense, out)


def available_backends() -> dict[str, object]:
    backends: dict[str, object] = {"python": _csr_matmul_py}
    if _COMPILED is not None:
        backends["compiled"] = _csr_matmul_c
    return backends


def _select_backend() -> str:
    choice = os.environ.get("CHEBSPECTRAL_KERNEL", "auto").lower()
    if choice == "python":
        return "python"
    if choice == "compiled":
        if _COMPILED is None:
            raise ImportError("compiled kernel requested but the extension is not built")
        return "compiled"
    return "compiled" if _COMPILED is not None else "python"


ACTIVE_BACKEND = _select_backend()
_ACTIVE = available_backends()[ACTIVE_BACKEND]


def csr_matmul(n: int, row_ptr: np.ndarray, col_idx: np.ndarray, values: np.ndarray,
               dense: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Multiply an n-row CSR matrix by a dense block, returning a new array."""
    dense = np.ascontiguousarray(dense, dtype=np.float64)
    out = np.zeros((n, dense.shape[1]), dtype=np.float64)
    fn = _ACTIVE if backend is None else available_backends()[backend]
    fn(row_ptr, col_idx, values, dense, out)
    return out
