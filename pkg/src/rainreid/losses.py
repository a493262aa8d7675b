"""Adversarial, reconstruction, classification and triplet losses plus their sum.

Probability-space functions (``adversarial_loss``, ``classification_loss``)
validate their inputs and are the reference definitions; training goes through
the ``*_from_logits`` variants, which are numerically safe and agree with the
reference wherever both are defined.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from rainreid.errors import InvalidArgumentError

PROB_FLOOR = 1e-12


def _as_tensor(x, dtype=torch.float64):
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=dtype)


# -- adversarial ---------------------------------------------------------------

def adversarial_loss(d_hr, d_lr):
    """mean log D(f_H) + mean log(1 - D(f_L)); both inputs strictly inside (0, 1)."""
    d_hr, d_lr = _as_tensor(d_hr), _as_tensor(d_lr)
    for name, d in (("d_hr", d_hr), ("d_lr", d_lr)):
        if d.numel() == 0 or not torch.all((d > 0) & (d < 1)):
            raise InvalidArgumentError(f"{name} must lie strictly inside (0, 1)")
    return torch.log(d_hr).mean() + torch.log1p(-d_lr).mean()


def adversarial_loss_from_logits(logit_hr, logit_lr):
    """Same value as :func:`adversarial_loss` on sigmoid(logits), via log-sigmoid."""
    return F.logsigmoid(logit_hr).mean() + F.logsigmoid(-logit_lr).mean()


def generator_adversarial_loss(logit_hr, logit_lr, mode="minmax"):
    """The extractor's adversarial objective (to be minimized).

    ``minmax`` is the literal objective; ``nonsaturating`` instead minimizes
    -log D(f_L), which has strong gradients while D still wins easily.
    """
    if mode == "minmax":
        return adversarial_loss_from_logits(logit_hr, logit_lr)
    if mode == "nonsaturating":
        return -F.logsigmoid(logit_lr).mean()
    raise InvalidArgumentError(f"unknown adversarial mode {mode!r}")


# -- reconstruction ------------------------------------------------------------

def reconstruction_loss(recon_hr, target_hr, recon_lr=None, target_hr_of_lr=None):
    """Mean absolute error of the HR branch plus that of the LR branch (target: HR twin)."""
    terms = [(recon_hr, target_hr)]
    if recon_lr is not None or target_hr_of_lr is not None:
        terms.append((recon_lr, target_hr_of_lr))
    total = 0.0
    for recon, target in terms:
        recon, target = _as_tensor(recon), _as_tensor(target)
        if recon.shape != target.shape:
            raise InvalidArgumentError(
                f"reconstruction shape {tuple(recon.shape)} != target {tuple(target.shape)}"
            )
        total = total + (recon - target).abs().mean()
    return total


# -- classification ------------------------------------------------------------

def _nll_probs(pred, labels):
    pred, labels = _as_tensor(pred), _as_tensor(labels)
    if pred.shape != labels.shape:
        raise InvalidArgumentError("prediction and one-hot label shapes differ")
    if torch.any(pred < 0) or not torch.allclose(
        pred.sum(dim=-1), torch.ones_like(pred.sum(dim=-1)), atol=1e-6
    ):
        raise InvalidArgumentError("predictions must be probability vectors")
    true_prob = (pred * labels).sum(dim=-1).clamp_min(PROB_FLOOR)
    return -torch.log(true_prob).mean()


def classification_loss(pred_hr, labels_hr, pred_lr=None, labels_lr=None):
    """Mean NLL of the true class, HR stream plus LR stream (one-hot labels)."""
    loss = _nll_probs(pred_hr, labels_hr)
    if pred_lr is not None:
        loss = loss + _nll_probs(pred_lr, labels_lr)
    return loss


def masked_cross_entropy(logits, labels, mask=None):
    """Mean cross-entropy over ``mask``-selected rows; an empty selection yields an exact, gradient-free 0."""
    if mask is None:
        return F.cross_entropy(logits, labels)
    if not bool(mask.any()):
        return (logits * 0.0).sum()
    return F.cross_entropy(logits[mask], labels[mask])


# -- triplet -------------------------------------------------------------------

def euclidean(a, b):
    """Row-wise L2 distance with a zero-safe square root."""
    sq = ((a - b) ** 2).sum(dim=-1)
    return torch.sqrt(sq.clamp_min(1e-16))


def pair_distances(v_anchor, v_pos, v_neg):
    v_anchor, v_pos, v_neg = _as_tensor(v_anchor), _as_tensor(v_pos), _as_tensor(v_neg)
    if not (v_anchor.shape == v_pos.shape == v_neg.shape):
        raise InvalidArgumentError("anchor, positive and negative must have equal shapes")
    d_pos = euclidean(v_anchor, v_pos)
    d_neg = euclidean(v_anchor, v_neg)
    # coincident points: report exact zero rather than the sqrt floor
    d_pos = torch.where(((v_anchor - v_pos) ** 2).sum(-1) == 0, torch.zeros_like(d_pos), d_pos)
    d_neg = torch.where(((v_anchor - v_neg) ** 2).sum(-1) == 0, torch.zeros_like(d_neg), d_neg)
    return d_pos, d_neg


def triplet_hinge(d_pos, d_neg, margin):
    if margin <= 0:
        raise InvalidArgumentError(f"margin must be > 0, got {margin}")
    d_pos, d_neg = _as_tensor(d_pos), _as_tensor(d_neg)
    if d_pos.numel() == 0:
        return d_pos.sum() * 0.0
    return F.relu(margin + d_pos - d_neg).mean()


def triplet_loss(streams, margin=0.3):
    """Sum over streams of the mean hinge max(0, m + d_pos - d_neg).

    ``streams`` is an iterable of ``(d_pos, d_neg)`` pairs, one per resolution stream.
    """
    if margin <= 0:
        raise InvalidArgumentError(f"margin must be > 0, got {margin}")
    total = 0.0
    for d_pos, d_neg in streams:
        total = total + triplet_hinge(d_pos, d_neg, margin)
    return _as_tensor(total)


def triplet_from_embeddings(v, anchors, positives, negatives, margin, hard=False, labels=None, mask=None):
    """Triplet term for one stream of embeddings.

    With ``hard=True`` each masked anchor uses its farthest positive and
    nearest negative within the stream instead of the sampled triple.
    """
    if hard:
        if labels is None:
            raise InvalidArgumentError("batch-hard mining needs labels")
        n = v.shape[0]
        mask = torch.ones(n, dtype=torch.bool) if mask is None else mask
        if int(mask.sum()) < 2:
            return (v * 0.0).sum()
        vm, lm = v[mask], labels[mask]
        sq = ((vm[:, None, :] - vm[None, :, :]) ** 2).sum(-1)
        dist = torch.sqrt(sq.clamp_min(1e-16))
        same = lm[:, None] == lm[None, :]
        eye = torch.eye(len(lm), dtype=torch.bool)
        pos_mask = same & ~eye
        neg_mask = ~same
        valid = pos_mask.any(1) & neg_mask.any(1)
        if not bool(valid.any()):
            return (v * 0.0).sum()
        d_pos = torch.where(pos_mask, dist, torch.full_like(dist, -1.0)).max(1).values
        d_neg = torch.where(neg_mask, dist, torch.full_like(dist, float("inf"))).min(1).values
        return triplet_hinge(d_pos[valid], d_neg[valid], margin)
    if len(anchors) == 0:
        return (v * 0.0).sum()
    d_pos = euclidean(v[anchors], v[positives])
    d_neg = euclidean(v[anchors], v[negatives])
    return triplet_hinge(d_pos, d_neg, margin)


# -- total ---------------------------------------------------------------------

@dataclass
class LossBundle:
    """Loss terms of one batch. ``total`` is the unit-weight sum of the reported terms."""

    adv: dict[int, float] = field(default_factory=dict)
    rec: float = 0.0
    cls: float = 0.0
    tri: float = 0.0
    margin: float = 0.3

    @property
    def adv_sum(self):
        return float(sum(self.adv.values()))

    @property
    def total(self):
        return self.adv_sum + self.rec + self.cls + self.tri

    def to_record(self, step):
        return {
            "step": int(step),
            "adv": {str(j): float(v) for j, v in sorted(self.adv.items())},
            "adv_sum": self.adv_sum,
            "rec": float(self.rec),
            "cls": float(self.cls),
            "tri": float(self.tri),
            "total": float(self.total),
        }


@dataclass
class Objectives:
    """The two sides of the min-max problem as differentiable scalars."""

    discriminator: torch.Tensor | None
    generator: torch.Tensor
    bundle: LossBundle


def total_loss(adv=None, rec=0.0, cls=0.0, tri=0.0, margin=0.3, generator_adv=None,
               weights=None):
    """Combine per-term tensors into a :class:`LossBundle` and the two optimization views.

    ``adv`` maps feature level -> adversarial value (differentiable in D);
    ``generator_adv`` maps level -> the extractor's adversarial objective
    (defaults to ``adv``, i.e. the literal min-max form). ``weights`` scales
    terms inside the objectives only; the bundle reports the raw terms.
    """
    adv = adv or {}
    generator_adv = adv if generator_adv is None else generator_adv
    w = {"adv": 1.0, "rec": 1.0, "cls": 1.0, "tri": 1.0, **(weights or {})}
    as_float = lambda t: float(t.detach()) if torch.is_tensor(t) else float(t)
    bundle = LossBundle(
        adv={j: as_float(v) for j, v in adv.items()},
        rec=as_float(rec),
        cls=as_float(cls),
        tri=as_float(tri),
        margin=margin,
    )
    disc = None
    if adv:
        # the discriminator maximizes adv; expressed as a quantity to minimize
        disc = -sum(adv.values())
    gen = w["rec"] * _as_tensor(rec) + w["cls"] * _as_tensor(cls) + w["tri"] * _as_tensor(tri)
    if generator_adv:
        gen = gen + w["adv"] * sum(generator_adv.values())
    return Objectives(discriminator=disc, generator=gen, bundle=bundle)
