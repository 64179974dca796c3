# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled CSR times dense-block kernel (the solver's hot inner loop)."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def csr_matmul(cnp.int64_t[::1] row_ptr,
               cnp.int64_t[::1] col_idx,
               double[::1] values,
               double[:, ::1] dense,
               double[:, ::1] out):
    """out[i, :] = sum over row i of values[idx] * dense[col_idx[idx], :].

    Accumulates in CSR index order so results match the numpy fallback
    bit for bit (extension built with FP contraction disabled).
    """
    cdef Py_ssize_t n = row_ptr.shape[0] - 1
    cdef Py_ssize_t k = dense.shape[1]
    cdef Py_ssize_t i, j, idx
    cdef cnp.int64_t c
    cdef double a
    for i in range(n):
        for idx in range(row_ptr[i], row_ptr[i + 1]):
            a = values[idx]
            c = col_idx[idx]
            for j in range(k):
                out[i, j] += a * dense[c, j]
