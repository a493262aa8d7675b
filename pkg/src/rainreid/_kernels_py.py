"""Pure numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` one-for-one and are selected automatically when
the compiled extension is unavailable (or ``RAINREID_PURE_PYTHON=1``).
"""

import numpy as np


def area_downsample(image, rate):
    """Block-average an HxWxC image by ``rate``, edge-padding to a multiple of it.

    Output is ceil(H/rate) x ceil(W/rate) x C.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    oh = -(-h // rate)
    ow = -(-w // rate)
    pad_h = oh * rate - h
    pad_w = ow * rate - w
    if pad_h or pad_w:
        image = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    blocks = image.reshape(oh, rate, ow, rate, image.shape[2])
    return blocks.mean(axis=(1, 3))


def _axis_weights(n_in, n_out):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_resize(image, out_h, out_w):
    """Half-pixel-centred bilinear resize (same convention as align_corners=False)."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = image[y0][:, x0] * (1.0 - fx) + image[y0][:, x1] * fx
    bottom = image[y1][:, x0] * (1.0 - fx) + image[y1][:, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def pairwise_euclidean(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    # chunk rows to bound the (rows, G, d) temporary
    step = max(1, 2_000_000 // max(1, b.shape[0] * max(1, a.shape[1])))
    for start in range(0, a.shape[0], step):
        diff = a[start:start + step, None, :] - b[None, :, :]
        out[start:start + step] = np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    return out


def match_positions(dist, query_ids, gallery_ids):
    """0-based positions of every correct gallery entry in each query's ranking.

    Ranking is ascending distance with ties broken by gallery index. Returns
    ``(offsets, positions)`` in CSR layout: the matches of query ``i`` are
    ``positions[offsets[i]:offsets[i + 1]]``, sorted ascending.
    """
    dist = np.asarray(dist, dtype=np.float64)
    query_ids = np.asarray(query_ids, dtype=np.int64)
    gallery_ids = np.asarray(gallery_ids, dtype=np.int64)
    n_q = dist.shape[0]
    offsets = np.zeros(n_q + 1, dtype=np.int64)
    chunks = []
    index = np.arange(dist.shape[1])
    for i in range(n_q):
        row = dist[i]
        hits = np.flatnonzero(gallery_ids == query_ids[i])
        if hits.size:
            d = row[hits][:, None]
            before = (row[None, :] < d) | ((row[None, :] == d) & (index[None, :] < hits[:, None]))
            pos = np.sort(before.sum(axis=1))
        else:
            pos = np.empty(0, dtype=np.int64)
        chunks.append(pos.astype(np.int64))
        offsets[i + 1] = offsets[i] + pos.size
    positions = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
    return offsets, positions
