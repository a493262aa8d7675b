"""Multi-low-resolution dataset synthesis, toy corpus, splits and batching."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from rainreid import kernels
from rainreid.errors import InvalidArgumentError, ProtocolError


@dataclass(eq=False)
class ImageRecord:
    """One image with its identity, camera, down-sampling rate and HR twin.

    ``pixels`` is what the network sees; ``hr_pixels`` is the HR ground truth
    used as the reconstruction target (the same array when ``rate == 1``).
    """

    pixels: np.ndarray
    identity: int
    camera: int = 0
    rate: int = 1
    hr_pixels: np.ndarray | None = None
    labeled: bool = True
    path: str | None = None

    def __post_init__(self):
        if self.hr_pixels is None:
            self.hr_pixels = self.pixels
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise InvalidArgumentError(f"pixels must be HxWx3, got {self.pixels.shape}")
        if self.pixels.shape != self.hr_pixels.shape:
            raise InvalidArgumentError(
                f"pixels {self.pixels.shape} and hr_pixels {self.hr_pixels.shape} differ in shape"
            )
        if self.rate < 1:
            raise InvalidArgumentError(f"rate must be >= 1, got {self.rate}")
        if self.identity < 0:
            raise InvalidArgumentError(f"identity must be non-negative, got {self.identity}")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class MlrDataset:
    train: list[ImageRecord]
    query: list[ImageRecord]
    gallery: list[ImageRecord]
    num_identities: int
    rates_used: set[int] = field(default_factory=set)

    def validate(self):
        train_ids = {r.identity for r in self.train}
        test_ids = {r.identity for r in self.query} | {r.identity for r in self.gallery}
        overlap = train_ids & test_ids
        if overlap:
            raise ProtocolError(f"train and test identities overlap: {sorted(overlap)[:10]}")
        gallery_ids = [r.identity for r in self.gallery]
        if len(gallery_ids) != len(set(gallery_ids)):
            raise ProtocolError("gallery must hold exactly one record per identity")
        if any(r.rate != 1 for r in self.gallery):
            raise ProtocolError("gallery records must be HR (rate=1)")
        if any(r.rate <= 1 for r in self.query):
            raise ProtocolError("query records must be LR (rate>1)")
        missing = {r.identity for r in self.query} - set(gallery_ids)
        if missing:
            raise ProtocolError(f"query identities without gallery entry: {sorted(missing)}")
        for r in self.train + self.query + self.gallery:
            if not 0 <= r.identity < self.num_identities:
                raise ProtocolError(f"identity {r.identity} outside [0, {self.num_identities})")
        return self

    @property
    def train_identities(self):
        return sorted({r.identity for r in self.train})

    @property
    def test_identities(self):
        return sorted({r.identity for r in self.gallery})


@dataclass(frozen=True)
class CameraPolicy:
    """Which cameras are down-sampled, and how their rates are drawn.

    ``per_image`` draws a fresh rate for every image; otherwise one rate is
    drawn per LR camera and shared by all its images.
    """

    lr_cameras: frozenset[int] = frozenset({1})
    per_image: bool = True


def _check_image(image):
    image = np.asarray(image)
    if image.ndim != 3:
        raise InvalidArgumentError(f"expected HxWxC image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise InvalidArgumentError("image contains non-finite values")
    return image


def downsample_upsample(image, rate):
    """Degrade ``image`` to 1/rate resolution and resize it back to its own size.

    Area averaging to ceil(H/rate) x ceil(W/rate), then bilinear up-sampling.
    ``rate=1`` returns the input object unchanged.
    """
    if not isinstance(rate, (int, np.integer)) or rate < 1:
        raise InvalidArgumentError(f"rate must be an integer >= 1, got {rate!r}")
    image = _check_image(image)
    if rate == 1:
        return image
    h, w = image.shape[:2]
    if h < rate or w < rate:
        raise InvalidArgumentError(f"image {h}x{w} smaller than rate {rate}")
    small = kernels.area_downsample(image, int(rate))
    return kernels.bilinear_resize(small, h, w).astype(image.dtype, copy=False)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def assign_rates(records, rates, camera_policy=None, seed=0):
    """Down-sample the images of the designated LR cameras at rates drawn from ``rates``.

    HR pixels are kept as the reconstruction target. Records of other cameras
    come back untouched.
    """
    records = list(records)
    rates = sorted({int(r) for r in rates})
    if not records:
        raise InvalidArgumentError("no records to synthesize from")
    if not rates:
        raise InvalidArgumentError("rates must be non-empty")
    if rates[0] < 1:
        raise InvalidArgumentError(f"rates must be >= 1, got {rates}")
    if any(r.rate != 1 for r in records):
        raise InvalidArgumentError("assign_rates expects HR records (rate=1)")
    policy = camera_policy or CameraPolicy()
    rng = _rng(seed)
    per_camera = {}
    if not policy.per_image:
        for cam in sorted(policy.lr_cameras):
            per_camera[cam] = int(rng.choice(rates))
    out = []
    for rec in records:
        if rec.camera not in policy.lr_cameras:
            out.append(rec)
            continue
        rate = per_camera[rec.camera] if per_camera else int(rng.choice(rates))
        if rate == 1:
            out.append(rec)
            continue
        out.append(
            replace(rec, pixels=downsample_upsample(rec.hr_pixels, rate), rate=rate)
        )
    return out


def split_query_gallery(test_records, seed=0):
    """Single-shot split: one random HR image per identity in the gallery, all LR images as queries."""
    rng = _rng(seed)
    by_id = {}
    for rec in test_records:
        by_id.setdefault(rec.identity, []).append(rec)
    query, gallery = [], []
    for ident in sorted(by_id):
        recs = by_id[ident]
        hr = [r for r in recs if r.rate == 1]
        lr = [r for r in recs if r.rate > 1]
        if not hr:
            raise ProtocolError(f"identity {ident} has no HR image for the gallery")
        if not lr:
            raise ProtocolError(f"identity {ident} has no LR image for the query set")
        gallery.append(hr[int(rng.integers(len(hr)))])
        query.extend(lr)
    return query, gallery


def split_identities(records, num_test, seed=0):
    """Disjoint identity-level train/test partition."""
    ids = sorted({r.identity for r in records})
    if not 0 < num_test < len(ids):
        raise InvalidArgumentError(
            f"num_test must be in (0, {len(ids)}), got {num_test}"
        )
    rng = _rng(seed)
    test_ids = set(rng.choice(ids, size=num_test, replace=False).tolist())
    train = [r for r in records if r.identity not in test_ids]
    test = [r for r in records if r.identity in test_ids]
    return train, test


def synthesize_mlr(hr_records, rates, camera_policy=None, seed=0, num_test_identities=None):
    """Build an MLR dataset: rate assignment, identity split, single-shot query/gallery.

    Train identities are relabelled to ``[0, K_train)`` so that the classifier
    head covers exactly the training vocabulary; test identities follow.
    """
    hr_records = list(hr_records)
    if not hr_records:
        raise InvalidArgumentError("no records to synthesize from")
    rates = {int(r) for r in rates}
    if not rates:
        raise InvalidArgumentError("rates must be non-empty")
    ss = np.random.SeedSequence(seed)
    split_seed, rate_seed, gallery_seed = ss.spawn(3)
    ids = sorted({r.identity for r in hr_records})
    if num_test_identities is None:
        num_test_identities = len(ids) // 2
    train, test = split_identities(hr_records, num_test_identities, np.random.default_rng(split_seed))
    train_ids = sorted({r.identity for r in train})
    test_ids = sorted({r.identity for r in test})
    remap = {old: new for new, old in enumerate(train_ids + test_ids)}
    rate_rng = np.random.default_rng(rate_seed)
    train = assign_rates(train, rates, camera_policy, rate_rng)
    test = assign_rates(test, rates, camera_policy, rate_rng)
    train = [replace(r, identity=remap[r.identity]) for r in train]
    test = [replace(r, identity=remap[r.identity]) for r in test]
    query, gallery = split_query_gallery(test, np.random.default_rng(gallery_seed))
    used = {r.rate for r in train + query + gallery}
    return MlrDataset(
        train=train,
        query=query,
        gallery=gallery,
        num_identities=len(ids),
        rates_used=used,
    ).validate()


# -- toy corpus ----------------------------------------------------------------

_PALETTE = np.array(
    [
        [0.85, 0.15, 0.15],
        [0.15, 0.65, 0.20],
        [0.15, 0.25, 0.85],
        [0.90, 0.80, 0.15],
        [0.80, 0.30, 0.80],
        [0.15, 0.75, 0.80],
        [0.95, 0.55, 0.15],
        [0.50, 0.50, 0.50],
        [0.10, 0.10, 0.10],
        [0.92, 0.92, 0.92],
    ]
)


@dataclass(frozen=True)
class _IdentityPattern:
    band_edges: tuple[float, ...]
    band_colors: np.ndarray
    stripe_band: int
    stripe_color: np.ndarray
    stripe_period: int
    stripe_vertical: bool
    stripe_phase: int
    background: np.ndarray


def _identity_pattern(rng):
    n_bands = int(rng.integers(2, 4))
    cuts = np.sort(rng.uniform(0.25, 0.8, size=n_bands - 1))
    colors = _PALETTE[rng.choice(len(_PALETTE), size=n_bands, replace=True)]
    colors = np.clip(colors + rng.normal(0.0, 0.06, size=colors.shape), 0.0, 1.0)
    stripe_color = np.clip(_PALETTE[int(rng.integers(len(_PALETTE)))] + rng.normal(0.0, 0.06, 3), 0, 1)
    return _IdentityPattern(
        band_edges=tuple(cuts.tolist()),
        band_colors=colors,
        stripe_band=int(rng.integers(n_bands)),
        stripe_color=stripe_color,
        stripe_period=int(rng.integers(2, 5)),
        stripe_vertical=bool(rng.integers(2)),
        stripe_phase=int(rng.integers(4)),
        background=np.clip(rng.uniform(0.3, 0.7) + rng.normal(0, 0.03, 3), 0, 1),
    )


def _render(pattern, side, rng, noise=0.03):
    h = w = side
    img = np.empty((h, w, 3))
    img[:] = pattern.background
    margin = max(1, side // 8)
    top, bottom = margin, h - margin // 2
    left, right = side // 4, w - side // 4
    body_h = bottom - top
    edges = [0.0, *pattern.band_edges, 1.0]
    rows = np.arange(h)
    cols = np.arange(w)
    for b in range(len(edges) - 1):
        r0 = top + int(round(edges[b] * body_h))
        r1 = top + int(round(edges[b + 1] * body_h))
        img[r0:r1, left:right] = pattern.band_colors[b]
        if b == pattern.stripe_band:
            if pattern.stripe_vertical:
                on = ((cols[left:right] + pattern.stripe_phase) // pattern.stripe_period) % 2 == 0
                region = img[r0:r1, left:right]
                region[:, on] = pattern.stripe_color
            else:
                on = ((rows[r0:r1] + pattern.stripe_phase) // pattern.stripe_period) % 2 == 0
                region = img[r0:r1, left:right]
                region[on, :] = pattern.stripe_color
    dy, dx = rng.integers(-2, 3, size=2)
    img = np.roll(img, (int(dy), int(dx)), axis=(0, 1))
    img = img * rng.uniform(0.85, 1.15) + rng.normal(0.0, noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    # quantize to 8-bit levels so PNG round trips are exact
    return np.round(img * 255.0) / 255.0


def make_toy_corpus(num_identities, images_per_identity, side, seed=0, num_cameras=2, noise=0.03):
    """Procedural identities (coloured body bands + one striped band) with per-image jitter.

    Images cycle through ``num_cameras`` cameras. All records are HR (rate=1).
    """
    if num_identities < 2:
        raise InvalidArgumentError("num_identities must be >= 2")
    if images_per_identity < 2:
        raise InvalidArgumentError("images_per_identity must be >= 2")
    if side < 16:
        raise InvalidArgumentError("side must be >= 16")
    ss = np.random.SeedSequence(seed)
    id_seeds = ss.spawn(num_identities)
    records = []
    for ident, id_seed in enumerate(id_seeds):
        pattern_seed, render_seed = id_seed.spawn(2)
        pattern = _identity_pattern(np.random.default_rng(pattern_seed))
        render_rng = np.random.default_rng(render_seed)
        for k in range(images_per_identity):
            px = _render(pattern, side, render_rng, noise)
            records.append(ImageRecord(pixels=px, identity=ident, camera=k % num_cameras))
    return records


# -- batching and label masking ------------------------------------------------

@dataclass
class TripletBatch:
    """P x Q identity-balanced batch. Triples index into ``records``."""

    records: list[ImageRecord]
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    indices: np.ndarray | None = None

    @property
    def labels(self):
        return np.array([r.identity for r in self.records], dtype=np.int64)


def _group_by_identity(records):
    groups = {}
    for i, rec in enumerate(records):
        groups.setdefault(rec.identity, []).append(i)
    return groups


def make_triplets(labels, rng, usable=None):
    """For every usable anchor pick a same-id positive (other index) and a different-id negative.

    Anchors without a valid positive or negative are skipped.
    """
    labels = np.asarray(labels)
    n = len(labels)
    usable = np.ones(n, dtype=bool) if usable is None else np.asarray(usable, dtype=bool)
    idx = np.arange(n)
    anchors, positives, negatives = [], [], []
    for a in range(n):
        if not usable[a]:
            continue
        pos = idx[usable & (labels == labels[a]) & (idx != a)]
        neg = idx[usable & (labels != labels[a])]
        if pos.size == 0 or neg.size == 0:
            continue
        anchors.append(a)
        positives.append(int(rng.choice(pos)))
        negatives.append(int(rng.choice(neg)))
    as_arr = lambda v: np.asarray(v, dtype=np.int64)
    return as_arr(anchors), as_arr(positives), as_arr(negatives)


def sample_triplet_batch(train, identities_per_batch, images_per_identity, seed=0):
    """Sample P identities x Q images and one random triple per anchor."""
    rng = _rng(seed)
    P, Q = identities_per_batch, images_per_identity
    if P < 2:
        raise InvalidArgumentError("identities_per_batch must be >= 2")
    if Q < 2:
        raise InvalidArgumentError("images_per_identity must be >= 2 to form positives")
    groups = _group_by_identity(train)
    eligible = sorted(i for i, g in groups.items() if len(g) >= Q)
    if len(eligible) < P:
        raise InvalidArgumentError(
            f"need {P} identities with >= {Q} images, found {len(eligible)}"
        )
    chosen = rng.choice(eligible, size=P, replace=False)
    picks = []
    for ident in chosen:
        picks.extend(rng.choice(groups[int(ident)], size=Q, replace=False).tolist())
    records = [train[i] for i in picks]
    labels = np.array([r.identity for r in records])
    a, p, n = make_triplets(labels, rng)
    return TripletBatch(records=records, anchors=a, positives=p, negatives=n,
                        indices=np.asarray(picks, dtype=np.int64))


def mask_labels(train, labeled_fraction, seed=0):
    """Flag exactly floor(fraction * N) records as labeled, spread round-robin across identities."""
    if not 0.0 <= labeled_fraction <= 1.0:
        raise InvalidArgumentError(f"labeled_fraction must be in [0, 1], got {labeled_fraction}")
    train = list(train)
    n_labeled = math.floor(labeled_fraction * len(train) + 1e-9)
    rng = _rng(seed)
    groups = _group_by_identity(train)
    order_ids = list(groups)
    rng.shuffle(order_ids)
    shuffled = {i: rng.permutation(groups[i]).tolist() for i in order_ids}
    ranked = []
    depth = max(len(g) for g in groups.values())
    for k in range(depth):
        for ident in order_ids:
            if k < len(shuffled[ident]):
                ranked.append(shuffled[ident][k])
    chosen = set(ranked[:n_labeled])
    return [replace(r, labeled=i in chosen) for i, r in enumerate(train)]


# -- folders and manifests -----------------------------------------------------

def _read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def _write_png(path, pixels):
    from PIL import Image

    arr = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image_folder(root):
    """Read ``root/<identity_id>/<camera_id>_<index>.png`` into HR records.

    Identity directory names are mapped to contiguous integer labels in sorted order.
    """
    root = Path(root)
    if not root.is_dir():
        raise InvalidArgumentError(f"dataset root {root} is not a directory")
    id_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    records = []
    for label, id_dir in enumerate(id_dirs):
        for img_path in sorted(id_dir.glob("*.png")):
            cam, _, _ = img_path.stem.partition("_")
            try:
                camera = int(cam)
            except ValueError:
                raise InvalidArgumentError(
                    f"{img_path}: file name must be <camera_id>_<index>.png"
                ) from None
            records.append(
                ImageRecord(pixels=_read_png(img_path), identity=label, camera=camera,
                            path=str(img_path))
            )
    if not records:
        raise InvalidArgumentError(f"no images found under {root}")
    return records


MANIFEST_FIELDS = ("path", "identity", "camera", "rate", "split", "labeled")


def write_manifest(dataset, out_dir, name="manifest.jsonl"):
    """Write HR images as PNGs plus a JSON-lines manifest.

    LR pixels are not stored: they are re-synthesized from the HR image and the
    recorded rate on load, which is exact because synthesis is deterministic.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / name
    with open(manifest, "w") as fh:
        for split in ("train", "query", "gallery"):
            for k, rec in enumerate(getattr(dataset, split)):
                rel = f"images/{split}_{k:05d}_id{rec.identity}_c{rec.camera}.png"
                _write_png(out_dir / rel, rec.hr_pixels)
                row = {
                    "path": rel,
                    "identity": int(rec.identity),
                    "camera": int(rec.camera),
                    "rate": int(rec.rate),
                    "split": split,
                    "labeled": bool(rec.labeled),
                }
                fh.write(json.dumps(row) + "\n")
    return manifest


def read_manifest(path):
    """Inverse of :func:`write_manifest`."""
    path = Path(path)
    base = path.parent
    splits = {"train": [], "query": [], "gallery": []}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            missing = [f for f in MANIFEST_FIELDS if f not in row]
            if missing:
                raise InvalidArgumentError(f"{path}:{lineno}: missing fields {missing}")
            if row["split"] not in splits:
                raise InvalidArgumentError(f"{path}:{lineno}: unknown split {row['split']!r}")
            img_path = Path(row["path"])
            if not img_path.is_absolute():
                img_path = base / img_path
            hr = _read_png(img_path)
            rate = int(row["rate"])
            splits[row["split"]].append(
                ImageRecord(
                    pixels=downsample_upsample(hr, rate),
                    hr_pixels=hr,
                    identity=int(row["identity"]),
                    camera=int(row["camera"]),
                    rate=rate,
                    labeled=bool(row["labeled"]),
                    path=str(img_path),
                )
            )
    all_recs = splits["train"] + splits["query"] + splits["gallery"]
    num_ids = max(r.identity for r in all_recs) + 1
    return MlrDataset(
        num_identities=num_ids,
        rates_used={r.rate for r in all_recs},
        **splits,
    ).validate()
