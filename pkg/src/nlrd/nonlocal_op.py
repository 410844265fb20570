"""The sparse non-local operator defined by a neighbor table and a weight vector.

With table rows (q_n1=n, q_n2, ..., q_nL) and weights a, the operator is
W_a = sum_j a_j V_j where V_j selects each pixel's j-th matched neighbor.
Row n of W_a therefore has at most L nonzeros: a_j at column q_nj.  The
matrix is never materialized; everything below works off the table.

All three routines accept per-pixel value arrays of any shape (flat or
image-shaped) and return the same shape.
"""

from __future__ import annotations

import numpy as np


def _flat(v, pixel_count: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size != pixel_count:
        raise ValueError(f"value array has {v.size} entries, table covers {pixel_count} pixels")
    return v.reshape(-1)


def _weights(a, neighbor_count: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1 or a.size != neighbor_count:
        raise ValueError(f"weight vector shape {a.shape} does not match {neighbor_count} table columns")
    return a


def apply_nonlocal(v, table: np.ndarray, a) -> np.ndarray:
    """W_a v: out[n] = sum_j a_j * v[q_nj]."""
    p, num_neighbors = table.shape
    vf = _flat(v, p)
    a = _weights(a, num_neighbors)
    out = a[0] * vf[table[:, 0]]
    for j in range(1, num_neighbors):
        out += a[j] * vf[table[:, j]]
    return out.reshape(np.shape(v))


def apply_nonlocal_adjoint(h, table: np.ndarray, a) -> np.ndarray:
    """W_aᵀ h: scatter-accumulate out[q_nj] += a_j * h[n].

    Built on bincount so the accumulation order is fixed by the table,
    independent of threading.
    """
    p, num_neighbors = table.shape
    hf = _flat(h, p)
    a = _weights(a, num_neighbors)
    out = np.zeros(p)
    for j in range(num_neighbors):
        out += a[j] * np.bincount(table[:, j], weights=hf, minlength=p)
    return out.reshape(np.shape(h))


def nonlocal_weight_gradient(h, hprime, u_hat, e_hat, table: np.ndarray, a) -> np.ndarray:
    """Gradient of the stage loss with respect to the raw weight entries a.

    The full Jacobian with respect to the dense matrix W is
    -h ê^T - (diag(W ê) h') û^T with ê the filtered upstream error; only
    the entries on the table's sparsity pattern contribute, and column j
    of the table picks out dℓ/da_j:

        grad[j] = sum_n ( -h[n]·ê[q_nj] - (Wê)[n]·h'[n]·û[q_nj] )
    """
    p, num_neighbors = table.shape
    hf = _flat(h, p)
    hpf = _flat(hprime, p)
    uf = _flat(u_hat, p)
    ef = _flat(e_hat, p)
    a = _weights(a, num_neighbors)
    we = apply_nonlocal(ef, table, a)
    coef = we * hpf
    grad = np.empty(num_neighbors)
    for j in range(num_neighbors):
        q = table[:, j]
        grad[j] = -np.sum(hf * ef[q] + coef * uf[q])
    return grad


def dense_nonlocal_matrix(table: np.ndarray, a) -> np.ndarray:
    """Materialize W_a as a dense (p, p) array.  Small inputs only."""
    p, num_neighbors = table.shape
    a = _weights(a, num_neighbors)
    w = np.zeros((p, p))
    for n in range(p):
        for j in range(num_neighbors):
            w[n, table[n, j]] += a[j]
    return w
