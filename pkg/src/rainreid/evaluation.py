"""Single-shot cross-resolution evaluation: embeddings, distances, CMC, mAP, probes."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from rainreid import kernels
from rainreid.datagen import CameraPolicy, ImageRecord, assign_rates, downsample_upsample, split_query_gallery
from rainreid.errors import InvalidArgumentError, ProtocolError
from rainreid.model import images_to_tensor

REPORT_SCHEMA_VERSION = 1
DEFAULT_RANKS = (1, 5, 10, 20)


@dataclass
class EvalReport:
    cmc: dict[int, float]
    map: float
    per_query_ranks: list[list[int]] = field(default_factory=list)
    fingerprint: str = ""
    query_rates: list[int] = field(default_factory=list)
    num_queries: int = 0
    gallery_size: int = 0

    @property
    def rank1(self):
        return self.cmc.get(1, float("nan"))

    def to_dict(self):
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "cmc": {str(k): float(v) for k, v in sorted(self.cmc.items())},
            "map": float(self.map),
            "num_queries": int(self.num_queries),
            "gallery_size": int(self.gallery_size),
            "query_rates": sorted(int(r) for r in self.query_rates),
            "fingerprint": self.fingerprint,
            "per_query_ranks": [list(map(int, r)) for r in self.per_query_ranks],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise InvalidArgumentError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(
            cmc={int(k): float(v) for k, v in d["cmc"].items()},
            map=float(d["map"]),
            per_query_ranks=[list(r) for r in d.get("per_query_ranks", [])],
            fingerprint=d.get("fingerprint", ""),
            query_rates=list(d.get("query_rates", [])),
            num_queries=int(d.get("num_queries", 0)),
            gallery_size=int(d.get("gallery_size", 0)),
        )

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def validate_report(d):
    """Raise if ``d`` does not follow the report schema."""
    required = {"schema_version": int, "cmc": dict, "map": float, "num_queries": int,
                "gallery_size": int, "query_rates": list, "fingerprint": str,
                "per_query_ranks": list}
    for key, typ in required.items():
        if key not in d:
            raise InvalidArgumentError(f"report missing '{key}'")
        if typ is float and isinstance(d[key], int):
            continue
        if not isinstance(d[key], typ):
            raise InvalidArgumentError(f"report field '{key}' should be {typ.__name__}")
    ranks = sorted(int(k) for k in d["cmc"])
    values = [d["cmc"][str(k)] for k in ranks]
    if any(b < a for a, b in zip(values, values[1:])):
        raise InvalidArgumentError("report cmc is not non-decreasing")
    if not 0.0 <= d["map"] <= 1.0:
        raise InvalidArgumentError("report map outside [0, 1]")
    return d


# -- embeddings and distances ----------------------------------------------------

@torch.no_grad()
def embed_set(model, records, normalize=True, batch_size=256):
    """N x d float64 matrix of pooled embeddings (L2-normalized rows when ``normalize``)."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    rows = []
    try:
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            x = images_to_tensor([r.pixels for r in chunk], dtype=dtype)
            rows.append(model.extract(x).embedding.double().numpy())
    finally:
        model.train(was_training)
    emb = np.concatenate(rows) if rows else np.zeros((0, model.config.embedding_dim))
    if normalize:
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        emb = emb / np.maximum(norms, 1e-12)
    return emb


def distance_matrix(query_emb, gallery_emb):
    query_emb = np.atleast_2d(np.asarray(query_emb, dtype=np.float64))
    gallery_emb = np.atleast_2d(np.asarray(gallery_emb, dtype=np.float64))
    if query_emb.shape[1] != gallery_emb.shape[1]:
        raise InvalidArgumentError(
            f"embedding dims differ: query {query_emb.shape[1]} vs gallery {gallery_emb.shape[1]}"
        )
    return kernels.pairwise_euclidean(query_emb, gallery_emb)


# -- ranking metrics ---------------------------------------------------------------

def _positions(dist, query_ids, gallery_ids):
    dist = np.asarray(dist, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if dist.shape != (len(query_ids), len(gallery_ids)):
        raise InvalidArgumentError(
            f"distance matrix {dist.shape} does not match {len(query_ids)} queries x {len(gallery_ids)} gallery"
        )
    missing = sorted(set(query_ids.tolist()) - set(gallery_ids.tolist()))
    if missing:
        raise ProtocolError(f"query identities absent from gallery: {missing[:10]}")
    return kernels.match_positions(dist, query_ids, gallery_ids)


def cmc(dist, query_ids, gallery_ids, ranks=DEFAULT_RANKS):
    """Percentage of queries whose first correct match lies within the top k, per k."""
    offsets, positions = _positions(dist, query_ids, gallery_ids)
    first = positions[offsets[:-1]]
    n_g = np.asarray(dist).shape[1]
    out = {}
    for k in ranks:
        if k < 1:
            raise InvalidArgumentError(f"rank must be >= 1, got {k}")
        out[int(k)] = 100.0 * int(np.count_nonzero(first < min(k, n_g))) / len(first)
    return out


def average_precisions(dist, query_ids, gallery_ids):
    """Per-query AP: mean over correct matches of precision at the match's position."""
    offsets, positions = _positions(dist, query_ids, gallery_ids)
    aps = np.empty(len(offsets) - 1)
    for i in range(len(aps)):
        pos = positions[offsets[i]:offsets[i + 1]]
        hits = np.arange(1, len(pos) + 1)
        aps[i] = np.mean(hits / (pos + 1.0))
    return aps


def map_score(dist, query_ids, gallery_ids):
    return float(np.mean(average_precisions(dist, query_ids, gallery_ids)))


def ranked_gallery(dist, query_index):
    """Gallery indices for one query ordered by ascending distance, ties by index."""
    row = np.asarray(dist)[query_index]
    return np.argsort(row, kind="stable")


def rank_list(dist, query_index, k, gallery_ids=None):
    """Identities (or indices when ``gallery_ids`` is None) of the top-k gallery entries."""
    n_g = np.asarray(dist).shape[1]
    if not 1 <= k <= n_g:
        raise InvalidArgumentError(f"k must be in [1, {n_g}], got {k}")
    order = ranked_gallery(dist, query_index)[:k]
    if gallery_ids is None:
        return order.tolist()
    return np.asarray(gallery_ids)[order].tolist()


# -- protocol ----------------------------------------------------------------------

def fingerprint(*parts):
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]


def evaluate(model, query, gallery, ranks=DEFAULT_RANKS, normalize=True, keep_ranks=10,
             config_fingerprint=""):
    """Standard protocol: embed, rank the HR gallery for every LR query, score."""
    if not query or not gallery:
        raise ProtocolError("query and gallery must be non-empty")
    q_emb = embed_set(model, query, normalize=normalize)
    g_emb = embed_set(model, gallery, normalize=normalize)
    dist = distance_matrix(q_emb, g_emb)
    q_ids = [r.identity for r in query]
    g_ids = [r.identity for r in gallery]
    keep = min(keep_ranks, len(gallery)) if keep_ranks else len(gallery)
    per_query = [ranked_gallery(dist, i)[:keep].tolist() for i in range(len(query))]
    return EvalReport(
        cmc=cmc(dist, q_ids, g_ids, ranks),
        map=map_score(dist, q_ids, g_ids),
        per_query_ranks=per_query,
        fingerprint=config_fingerprint,
        query_rates=sorted({r.rate for r in query}),
        num_queries=len(query),
        gallery_size=len(gallery),
    )


def resynthesize_queries(query, rate):
    """Re-degrade each query's HR twin at ``rate``."""
    return [
        ImageRecord(
            pixels=downsample_upsample(r.hr_pixels, rate),
            hr_pixels=r.hr_pixels,
            identity=r.identity,
            camera=r.camera,
            rate=rate,
            labeled=r.labeled,
        )
        for r in query
    ]


def unseen_resolution_eval(model, test_records, train_rates, probe_rate, ranks=DEFAULT_RANKS,
                           normalize=True, lr_cameras=(1,), seed=0, gallery=None):
    """Evaluate with queries synthesized at a rate the model never trained on.

    ``test_records`` are HR test images; LR-camera images become queries at
    ``probe_rate``. Pass ``gallery`` to reuse an existing gallery instead of
    drawing a new one.
    """
    if probe_rate in set(train_rates):
        raise InvalidArgumentError(
            f"probe rate {probe_rate} was seen in training {sorted(train_rates)}; use evaluate()"
        )
    hr = [
        r if r.rate == 1 else ImageRecord(pixels=r.hr_pixels, identity=r.identity,
                                          camera=r.camera, labeled=r.labeled)
        for r in test_records
    ]
    policy = CameraPolicy(lr_cameras=frozenset(lr_cameras))
    degraded = assign_rates(hr, {probe_rate}, policy, seed)
    query, drawn_gallery = split_query_gallery(degraded, seed)
    return evaluate(model, query, gallery or drawn_gallery, ranks=ranks, normalize=normalize)


def invariance_probe(model, hr_records, lr_records, normalize=True, seed=0):
    """Mean HR/LR twin distance and held-out accuracy of a linear HR-vs-LR classifier.

    Pairs are split (as pairs) into two halves; the probe trains on one half
    and is scored on the other. Chance is 50%.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    if len(hr_records) != len(lr_records) or not hr_records:
        raise InvalidArgumentError("invariance probe needs equal, non-empty HR and LR lists")
    for h, l in zip(hr_records, lr_records):
        if h.identity != l.identity or h.hr_pixels.shape != l.hr_pixels.shape or not np.array_equal(
            h.hr_pixels, l.hr_pixels
        ):
            raise InvalidArgumentError("HR and LR records are not twins of the same image")
    e_hr = embed_set(model, hr_records, normalize=normalize)
    e_lr = embed_set(model, lr_records, normalize=normalize)
    mean_dist = float(np.mean(np.linalg.norm(e_hr - e_lr, axis=1)))
    n = len(hr_records)
    if n < 2:
        raise InvalidArgumentError("invariance probe needs at least two pairs")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    fit_idx, test_idx = perm[: n // 2], perm[n // 2:]

    def stack(idx):
        x = np.concatenate([e_hr[idx], e_lr[idx]])
        y = np.concatenate([np.ones(len(idx)), np.zeros(len(idx))])
        return x, y

    x_fit, y_fit = stack(fit_idx)
    x_test, y_test = stack(test_idx)
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    probe.fit(x_fit, y_fit)
    acc = float(np.mean(probe.predict(x_test) == y_test))
    return mean_dist, acc


def twin_pairs(records, rates, seed=0):
    """(HR, LR) twins for each record's HR image, LR rate drawn from ``rates``."""
    rng = np.random.default_rng(seed)
    rates = sorted(rates)
    hr, lr = [], []
    for r in records:
        base = r.hr_pixels
        rate = int(rng.choice(rates))
        hr.append(ImageRecord(pixels=base, identity=r.identity, camera=r.camera))
        lr.append(ImageRecord(pixels=downsample_upsample(base, rate), hr_pixels=base,
                              identity=r.identity, camera=r.camera, rate=rate))
    return hr, lr


# -- export ----------------------------------------------------------------------

def export_embeddings(path, embeddings, identities, rates):
    """CSV with columns identity, rate, e0..e{d-1}; floats written with repr for exact round trips."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["identity", "rate"] + [f"e{i}" for i in range(embeddings.shape[1])])
        for ident, rate, row in zip(identities, rates, embeddings):
            w.writerow([int(ident), int(rate)] + [repr(float(x)) for x in row])


def read_embeddings(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:2] != ["identity", "rate"]:
        raise InvalidArgumentError(f"{path}: unexpected header {header[:2]}")
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    rates = np.array([int(r[1]) for r in body], dtype=np.int64)
    emb = np.array([[float(x) for x in r[2:]] for r in body], dtype=np.float64)
    return emb.reshape(len(body), len(header) - 2), ids, rates
