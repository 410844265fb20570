"""Similar-patch search: the per-pixel neighbor index table.

For every pixel, the `num_neighbors` most similar patch centers inside a
square search window are recorded, the pixel itself always first.  The
table is a (pixel_count, num_neighbors) int64 array of linear row-major
pixel indices.  Column j of the table defines a 0/1 selection matrix, and
the weighted sum of those selections is the sparse non-local operator
applied elsewhere; the table itself is the canonical representation.

Similarity is mean squared error between patches extracted from the
mirror-padded image, so edge pixels have full patches too.  Ordering is
by (distance, linear index), which makes the table deterministic.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image import as_image, mirror_pad

# Cap the per-chunk distance buffer at ~32 MB so large images stream.
_CHUNK_BYTES = 1 << 25


def _check_sizes(patch: int, window: int) -> None:
    if patch % 2 == 0 or patch < 1:
        raise ValueError(f"patch size must be odd and positive, got {patch}")
    if window % 2 == 0 or window < 1:
        raise ValueError(f"window size must be odd and positive, got {window}")
    if window < patch:
        raise ValueError(f"window {window} smaller than patch {patch}")


def _patch_stack(f: np.ndarray, patch: int) -> np.ndarray:
    """All mirror-padded patches, flattened: shape (H, W, patch*patch)."""
    r = patch // 2
    padded = mirror_pad(f, r)
    views = sliding_window_view(padded, (patch, patch))
    return views.reshape(f.shape[0], f.shape[1], patch * patch)


def patch_distance(f: np.ndarray, n1: int, n2: int, patch: int) -> float:
    """Mean squared difference of the patches centered at linear indices n1, n2."""
    f = as_image(f)
    if patch % 2 == 0 or patch < 1:
        raise ValueError(f"patch size must be odd and positive, got {patch}")
    npix = f.size
    for n in (n1, n2):
        if not 0 <= n < npix:
            raise ValueError(f"pixel index {n} out of range for {f.shape}")
    r = patch // 2
    padded = mirror_pad(f, r)
    i1, j1 = divmod(int(n1), f.shape[1])
    i2, j2 = divmod(int(n2), f.shape[1])
    d = padded[i1 : i1 + patch, j1 : j1 + patch] - padded[i2 : i2 + patch, j2 : j2 + patch]
    return float(np.sum(d * d) / (patch * patch))


def compute_neighbor_table(f: np.ndarray, patch: int, window: int, num_neighbors: int) -> np.ndarray:
    """Exhaustive k-NN patch search, returning the (pixels, num_neighbors) table.

    Row n holds n itself followed by the num_neighbors-1 nearest other
    patch centers inside the window x window box around n, clipped to the
    image.  Ties in distance go to the smaller linear index.
    """
    f = as_image(f)
    _check_sizes(patch, window)
    if num_neighbors < 1:
        raise ValueError(f"need at least one neighbor, got {num_neighbors}")
    if not np.all(np.isfinite(f)):
        raise ValueError("image contains non-finite values")

    h, w = f.shape
    npix = h * w
    self_idx = np.arange(npix, dtype=np.int64)
    if num_neighbors == 1:
        return self_idx[:, None].copy()

    wr = window // 2
    offsets = [(dy, dx) for dy in range(-wr, wr + 1) for dx in range(-wr, wr + 1)]
    ncand = len(offsets)
    if num_neighbors > ncand:
        raise ValueError(f"num_neighbors {num_neighbors} exceeds window capacity {ncand}")

    flat = _patch_stack(f, patch)
    m2 = patch * patch
    cols = np.arange(w)
    table = np.empty((npix, num_neighbors), dtype=np.int64)
    table[:, 0] = self_idx

    chunk = max(1, _CHUNK_BYTES // (w * ncand * 8))
    for r0 in range(0, h, chunk):
        r1 = min(r0 + chunk, h)
        ref = flat[r0:r1]  # (cr, w, m2)
        dist = np.full((r1 - r0, w, ncand), np.inf)
        qidx = np.full((r1 - r0, w, ncand), npix, dtype=np.int64)
        rows = np.arange(r0, r1)
        for t, (dy, dx) in enumerate(offsets):
            if dy == 0 and dx == 0:
                continue  # self is pinned to column 0, not ranked
            qi = rows + dy
            qj = cols + dx
            ri = (qi >= 0) & (qi < h)
            rj = (qj >= 0) & (qj < w)
            if not (ri.any() and rj.any()):
                continue
            qi_c = np.clip(qi, 0, h - 1)
            qj_c = np.clip(qj, 0, w - 1)
            diff = flat[qi_c[:, None], qj_c[None, :]] - ref
            d = np.sum(diff * diff, axis=-1) / m2
            valid = ri[:, None] & rj[None, :]
            dist[:, :, t] = np.where(valid, d, np.inf)
            qidx[:, :, t] = np.where(valid, qi_c[:, None] * w + qj_c[None, :], npix)
        order = np.lexsort((qidx, dist), axis=-1)[..., : num_neighbors - 1]
        picked_d = np.take_along_axis(dist, order, axis=-1)
        if np.isinf(picked_d).any():
            raise ValueError(
                f"window {window}x{window} clipped to the image holds fewer than "
                f"{num_neighbors} candidates for some pixel"
            )
        picked = np.take_along_axis(qidx, order, axis=-1)
        table[r0 * w : r1 * w, 1:] = picked.reshape(-1, num_neighbors - 1)
    return table


def check_table(table: np.ndarray, pixel_count: int) -> np.ndarray:
    """Validate shape, range, self-first column and per-row distinctness."""
    table = np.asarray(table)
    if table.ndim != 2 or table.shape[0] != pixel_count:
        raise ValueError(f"table shape {table.shape} does not match {pixel_count} pixels")
    if not np.issubdtype(table.dtype, np.integer):
        raise ValueError(f"table must hold integer indices, got {table.dtype}")
    if table.min() < 0 or table.max() >= pixel_count:
        raise ValueError("table contains out-of-range pixel indices")
    if not np.array_equal(table[:, 0], np.arange(pixel_count)):
        raise ValueError("first table column must be the identity permutation")
    sorted_rows = np.sort(table, axis=1)
    if np.any(sorted_rows[:, 1:] == sorted_rows[:, :-1]):
        raise ValueError("table rows must hold distinct indices")
    return table.astype(np.int64, copy=False)
