import json
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rainreid.datagen import (
    CameraPolicy,
    ImageRecord,
    assign_rates,
    downsample_upsample,
    load_image_folder,
    make_toy_corpus,
    mask_labels,
    read_manifest,
    sample_triplet_batch,
    split_query_gallery,
    synthesize_mlr,
    write_manifest,
    _write_png,
)
from rainreid.errors import InvalidArgumentError, ProtocolError


@pytest.fixture(scope="module")
def corpus():
    return make_toy_corpus(20, 8, 32, seed=7)


# -- downsample_upsample --------------------------------------------------------

def test_rate_one_is_identity():
    img = np.random.default_rng(0).random((12, 9, 3))
    out = downsample_upsample(img, 1)
    assert np.array_equal(out, img)


def test_paper_sized_image_keeps_shape():
    img = np.random.default_rng(1).random((256, 128, 3))
    out = downsample_upsample(img, 2)
    assert out.shape == (256, 128, 3)
    from rainreid import kernels
    assert kernels.area_downsample(img, 2).shape == (128, 64, 3)


@pytest.mark.parametrize("rate", [2, 3, 4, 8])
def test_constant_image_is_preserved(rate):
    img = np.full((32, 32, 3), 0.37)
    np.testing.assert_allclose(downsample_upsample(img, rate), img, atol=1e-12)


@pytest.mark.parametrize("bad", [0, -1, 2.5])
def test_bad_rate_rejected(bad):
    with pytest.raises(InvalidArgumentError):
        downsample_upsample(np.zeros((8, 8, 3)), bad)


def test_non_finite_pixels_rejected():
    img = np.zeros((8, 8, 3))
    img[0, 0, 0] = np.nan
    with pytest.raises(InvalidArgumentError):
        downsample_upsample(img, 2)


def test_rate_larger_than_image_rejected():
    with pytest.raises(InvalidArgumentError):
        downsample_upsample(np.zeros((3, 8, 3)), 4)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(8, 24), w=st.integers(8, 24), rate=st.integers(1, 8), seed=st.integers(0, 99))
def test_shape_preserved_and_range_bounded(h, w, rate, seed):
    img = np.random.default_rng(seed).random((h, w, 3))
    out = downsample_upsample(img, rate)
    assert out.shape == img.shape
    # convex combinations of inputs stay in the input range
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


def test_information_loss_grows_with_rate(corpus):
    losses = []
    for rate in (1, 2, 3, 4, 8):
        losses.append(np.mean([np.abs(downsample_upsample(r.pixels, rate) - r.pixels).mean()
                               for r in corpus]))
    assert losses[0] == 0.0
    assert all(b >= a for a, b in zip(losses, losses[1:]))


# -- toy corpus -------------------------------------------------------------------

def test_toy_corpus_counts(corpus):
    assert len(corpus) == 160
    assert len({r.identity for r in corpus}) == 20
    assert all(r.pixels.shape == (32, 32, 3) for r in corpus)
    assert all(r.rate == 1 and r.pixels is r.hr_pixels for r in corpus)


def test_toy_corpus_deterministic(corpus):
    again = make_toy_corpus(20, 8, 32, seed=7)
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(corpus, again))
    other = make_toy_corpus(20, 8, 32, seed=8)
    assert not all(np.array_equal(a.pixels, b.pixels) for a, b in zip(corpus, other))


def test_intra_identity_closer_than_inter(corpus):
    flat = {}
    for r in corpus:
        flat.setdefault(r.identity, []).append(r.pixels.ravel())
    intra, inter = [], []
    for ident, imgs in flat.items():
        intra += [np.linalg.norm(a - b) for a, b in combinations(imgs, 2)]
    ids = sorted(flat)
    for i, j in combinations(ids, 2):
        inter += [np.linalg.norm(a - b) for a in flat[i] for b in flat[j]]
    assert np.mean(intra) < np.mean(inter)


@pytest.mark.parametrize("kwargs", [
    dict(num_identities=1, images_per_identity=4, side=32),
    dict(num_identities=4, images_per_identity=1, side=32),
    dict(num_identities=4, images_per_identity=4, side=8),
])
def test_toy_corpus_preconditions(kwargs):
    with pytest.raises(InvalidArgumentError):
        make_toy_corpus(seed=0, **kwargs)


# -- rate assignment / MLR synthesis ------------------------------------------------

def test_rates_uniform_within_binomial_bounds():
    recs = make_toy_corpus(30, 20, 16, seed=1)
    lr_cam = [r for r in recs if r.camera == 1]
    assert len(lr_cam) == 300
    out = assign_rates(recs, {2, 3, 4}, seed=5)
    counts = {r: 0 for r in (2, 3, 4)}
    for rec in out:
        if rec.camera == 1:
            counts[rec.rate] += 1
        else:
            assert rec.rate == 1
    lo, hi = stats.binom.interval(0.99, 300, 1 / 3)
    for c in counts.values():
        assert lo <= c <= hi


def test_rates_one_is_noop(corpus):
    out = assign_rates(corpus, {1}, seed=3)
    assert all(a is b for a, b in zip(out, corpus))


def test_lr_records_keep_hr_target(corpus):
    out = assign_rates(corpus, {4}, seed=0)
    for before, after in zip(corpus, out):
        assert np.array_equal(after.hr_pixels, before.pixels)
        if after.camera == 1:
            assert after.rate == 4
            np.testing.assert_array_equal(after.pixels, downsample_upsample(before.pixels, 4))


def test_per_camera_policy_shares_rate(corpus):
    out = assign_rates(corpus, {2, 3, 4}, CameraPolicy(per_image=False), seed=9)
    assert len({r.rate for r in out if r.camera == 1}) == 1


def test_assign_rates_errors(corpus):
    with pytest.raises(InvalidArgumentError):
        assign_rates([], {2}, seed=0)
    with pytest.raises(InvalidArgumentError):
        assign_rates(corpus, set(), seed=0)


def test_synthesize_mlr_invariants(corpus):
    ds = synthesize_mlr(corpus, {2, 3, 4}, seed=2)
    train_ids = {r.identity for r in ds.train}
    test_ids = {r.identity for r in ds.gallery}
    assert not train_ids & test_ids
    assert train_ids == set(range(len(train_ids)))
    assert len(ds.gallery) == len(test_ids) == 10
    assert all(r.rate == 1 for r in ds.gallery)
    assert all(r.rate > 1 for r in ds.query)
    assert not {id(r) for r in ds.query} & {id(r) for r in ds.gallery}
    assert ds.rates_used <= {1, 2, 3, 4}


def test_synthesize_mlr_deterministic(corpus):
    a = synthesize_mlr(corpus, {2, 3, 4}, seed=4)
    b = synthesize_mlr(corpus, {2, 3, 4}, seed=4)
    for split in ("train", "query", "gallery"):
        xs, ys = getattr(a, split), getattr(b, split)
        assert len(xs) == len(ys)
        for x, y in zip(xs, ys):
            assert x.identity == y.identity and x.rate == y.rate
            assert np.array_equal(x.pixels, y.pixels)


# -- query / gallery split ----------------------------------------------------------

def _rec(ident, rate, value=0.0):
    px = np.full((4, 4, 3), value)
    return ImageRecord(pixels=px, identity=ident, camera=int(rate > 1), rate=rate)


def test_split_counts():
    recs = [_rec(i, r, k) for i in range(10) for k, r in enumerate([2, 3, 4, 1, 1])]
    q, g = split_query_gallery(recs, seed=0)
    assert len(g) == 10 and len(q) == 30


def test_split_minimal_case():
    hr, lr = _rec(0, 1), _rec(0, 2)
    q, g = split_query_gallery([hr, lr], seed=0)
    assert g == [hr] and q == [lr]


def test_split_deterministic():
    recs = [_rec(i, r, k) for i in range(5) for k, r in enumerate([2, 1, 1, 1])]
    a = split_query_gallery(recs, seed=3)[1]
    b = split_query_gallery(recs, seed=3)[1]
    assert [id(x) for x in a] == [id(x) for x in b]


def test_split_missing_hr_names_identity():
    with pytest.raises(ProtocolError, match="identity 4"):
        split_query_gallery([_rec(4, 2), _rec(4, 3)], seed=0)


# -- triplet batches ------------------------------------------------------------------

def test_triplet_constraints(corpus):
    batch = sample_triplet_batch(corpus, 4, 4, seed=0)
    assert len(batch.records) == 16 and len(batch.anchors) == 16
    labels = batch.labels
    for a, p, n in zip(batch.anchors, batch.positives, batch.negatives):
        assert labels[a] == labels[p] != labels[n]
        assert a != p


def test_two_identities_force_negative(corpus):
    rng = np.random.default_rng(1)
    for _ in range(20):
        batch = sample_triplet_batch(corpus, 2, 2, rng)
        ids = set(batch.labels.tolist())
        assert len(ids) == 2
        for a, n in zip(batch.anchors, batch.negatives):
            assert {batch.labels[a], batch.labels[n]} == ids


def test_every_identity_eventually_sampled():
    recs = make_toy_corpus(8, 4, 16, seed=0)
    rng = np.random.default_rng(0)
    seen = np.zeros(8, dtype=int)
    for _ in range(1000):
        for i in set(sample_triplet_batch(recs, 4, 2, rng).labels.tolist()):
            seen[i] += 1
    assert (seen > 0).all()
    # each identity is picked with probability 4/8 per batch
    lo, hi = stats.binom.interval(0.9999, 1000, 0.5)
    assert ((seen >= lo) & (seen <= hi)).all()


def test_triplet_batch_errors(corpus):
    with pytest.raises(InvalidArgumentError):
        sample_triplet_batch(corpus, 1, 4, seed=0)
    with pytest.raises(InvalidArgumentError):
        sample_triplet_batch(corpus, 21, 2, seed=0)
    with pytest.raises(InvalidArgumentError):
        sample_triplet_batch(corpus, 4, 9, seed=0)


# -- label masking ---------------------------------------------------------------------

@pytest.mark.parametrize("fraction,expected", [(1.0, 160), (0.0, 0), (0.2, 32), (0.55, 88)])
def test_mask_counts(corpus, fraction, expected):
    out = mask_labels(corpus, fraction, seed=0)
    assert sum(r.labeled for r in out) == expected


def test_mask_is_identity_stratified(corpus):
    out = mask_labels(corpus, 0.125, seed=1)
    labeled_ids = [r.identity for r in out if r.labeled]
    assert len(labeled_ids) == 20 and len(set(labeled_ids)) == 20


def test_mask_deterministic(corpus):
    a = [r.labeled for r in mask_labels(corpus, 0.3, seed=2)]
    b = [r.labeled for r in mask_labels(corpus, 0.3, seed=2)]
    assert a == b


@pytest.mark.parametrize("bad", [-0.1, 1.5])
def test_mask_rejects_bad_fraction(corpus, bad):
    with pytest.raises(InvalidArgumentError):
        mask_labels(corpus, bad, seed=0)


# -- folders and manifests ----------------------------------------------------------------

def test_manifest_round_trip(tmp_path, corpus):
    ds = synthesize_mlr(corpus, {2, 3, 4}, seed=0)
    path = write_manifest(ds, tmp_path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert {tuple(sorted(r)) for r in rows} == {
        tuple(sorted(["path", "identity", "camera", "rate", "split", "labeled"]))
    }
    back = read_manifest(path)
    for split in ("train", "query", "gallery"):
        for a, b in zip(getattr(ds, split), getattr(back, split)):
            assert a.identity == b.identity and a.rate == b.rate and a.camera == b.camera
            assert np.array_equal(a.hr_pixels, b.hr_pixels)
            assert np.array_equal(a.pixels, b.pixels)


def test_image_folder_layout(tmp_path):
    rng = np.random.default_rng(0)
    for ident in ("0003", "0010"):
        (tmp_path / ident).mkdir()
        for cam in (0, 1):
            _write_png(tmp_path / ident / f"{cam}_000.png", rng.random((16, 8, 3)))
    recs = load_image_folder(tmp_path)
    assert len(recs) == 4
    assert [r.identity for r in recs] == [0, 0, 1, 1]
    assert [r.camera for r in recs] == [0, 1, 0, 1]
    assert recs[0].pixels.shape == (16, 8, 3)
    assert 0.0 <= recs[0].pixels.min() and recs[0].pixels.max() <= 1.0


def test_image_folder_bad_name(tmp_path):
    (tmp_path / "a").mkdir()
    _write_png(tmp_path / "a" / "front.png", np.zeros((4, 4, 3)))
    with pytest.raises(InvalidArgumentError):
        load_image_folder(tmp_path)
