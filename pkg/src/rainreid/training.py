"""Alternating min-max training of F, G, C against the discriminators."""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from rainreid import losses
from rainreid.datagen import (
    downsample_upsample,
    make_triplets,
    mask_labels,
    sample_triplet_batch,
)
from rainreid.errors import ConfigError, InvalidArgumentError, TrainingAborted
from rainreid.evaluation import EvalReport, evaluate, fingerprint
from rainreid.model import ModelConfig, RainModel, images_to_tensor, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 300
    epochs: int | None = None
    identities_per_batch: int = 4
    images_per_identity: int = 4
    lr: float = 3e-4
    lr_discriminator: float = 1e-4
    margin: float = 0.3
    rates: tuple[int, ...] = (2, 3, 4)
    train_on_lr: bool = True
    use_adv: bool = True
    use_rec: bool = True
    use_cls: bool = True
    use_tri: bool = True
    weight_adv: float = 1.0
    weight_rec: float = 1.0
    weight_cls: float = 1.0
    weight_tri: float = 1.0
    adv_mode: str = "minmax"
    discriminator_steps: int = 1
    grad_clip: float | None = 5.0
    batch_hard: bool = False
    labeled_fraction: float = 1.0
    seed: int = 0
    eval_every: int = 0
    normalize_embeddings: bool = True
    deterministic: bool = True
    workers: int = 1

    def __post_init__(self):
        self.rates = tuple(sorted({int(r) for r in self.rates}))
        self.validate()

    def validate(self):
        def bad(field_, msg):
            raise ConfigError(msg, field=field_)

        if not (self.use_adv or self.use_rec or self.use_cls or self.use_tri):
            bad("use_*", "at least one loss must be enabled")
        if self.lr <= 0:
            bad("lr", "learning rate must be > 0")
        if self.lr_discriminator <= 0:
            bad("lr_discriminator", "learning rate must be > 0")
        if self.margin <= 0:
            bad("margin", "margin must be > 0")
        if self.steps < 1 and not self.epochs:
            bad("steps", "steps must be >= 1")
        if self.epochs is not None and self.epochs < 1:
            bad("epochs", "epochs must be >= 1")
        if not self.rates or min(self.rates) < 1:
            bad("rates", "rates must be non-empty integers >= 1")
        if self.train_on_lr and all(r == 1 for r in self.rates):
            bad("rates", "LR training needs at least one rate > 1")
        if not 0.0 <= self.labeled_fraction <= 1.0:
            bad("labeled_fraction", "labeled_fraction must lie in [0, 1]")
        if self.labeled_fraction == 0.0 and not (self.use_rec or (self.use_adv and self.train_on_lr)):
            bad("labeled_fraction", "no labeled data and only identity losses enabled")
        if self.identities_per_batch < 2:
            bad("identities_per_batch", "need at least 2 identities per batch")
        if self.images_per_identity < 2:
            bad("images_per_identity", "need at least 2 images per identity")
        if self.adv_mode not in ("nonsaturating", "minmax"):
            bad("adv_mode", f"unknown adversarial mode {self.adv_mode!r}")
        if self.discriminator_steps < 1:
            bad("discriminator_steps", "must be >= 1")
        if self.workers < 1:
            bad("workers", "must be >= 1")

    @property
    def adversarial(self):
        return self.use_adv and self.train_on_lr

    def to_dict(self):
        d = asdict(self)
        d["rates"] = list(self.rates)
        return d


@dataclass
class TrainHistory:
    steps: list[dict] = field(default_factory=list)
    evals: list[tuple[int, EvalReport]] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def append(self, step, bundle, seconds):
        if self.steps and step <= self.steps[-1]["step"]:
            raise InvalidArgumentError("history steps must be strictly increasing")
        self.steps.append(bundle.to_record(step))
        self.seconds.append(seconds)

    def losses(self, key="total"):
        return np.array([s[key] for s in self.steps])


# -- batches -----------------------------------------------------------------------

@dataclass
class Batch:
    """Tensors for one step. The LR stream (if any) is aligned row-for-row with the HR stream."""

    x_hr: torch.Tensor
    target_hr: torch.Tensor
    x_lr: torch.Tensor | None
    target_lr: torch.Tensor | None
    labels: torch.Tensor
    labeled: torch.Tensor
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    lr_rates: list[int]


class LrTwinCache:
    """Memoized LR twins keyed by (record index, rate)."""

    def __init__(self, records):
        self.records = records
        self._cache = {}

    def get(self, index, rate):
        key = (index, rate)
        if key not in self._cache:
            rec = self.records[index]
            if rec.rate == rate:
                self._cache[key] = rec.pixels
            else:
                self._cache[key] = downsample_upsample(rec.hr_pixels, rate)
        return self._cache[key]


def make_batch(train, config, rng, cache=None, dtype=torch.float32):
    """Sample a P x Q batch and pair every HR image with an LR twin at a random training rate."""
    tb = sample_triplet_batch(train, config.identities_per_batch, config.images_per_identity, rng)
    recs = tb.records
    labeled = np.array([r.labeled for r in recs])
    labels = tb.labels
    a, p, n = make_triplets(labels, rng, usable=labeled)
    hr = [r.hr_pixels for r in recs]
    x_hr = images_to_tensor(hr, dtype)
    x_lr = target_lr = None
    lr_rates = []
    if config.train_on_lr:
        cache = cache or LrTwinCache(train)
        lr_rates = [int(rng.choice(config.rates)) for _ in recs]
        lr_imgs = [cache.get(int(i), r) for i, r in zip(tb.indices, lr_rates)]
        x_lr = images_to_tensor(lr_imgs, dtype)
        target_lr = x_hr
    return Batch(
        x_hr=x_hr,
        target_hr=x_hr,
        x_lr=x_lr,
        target_lr=target_lr,
        labels=torch.from_numpy(labels),
        labeled=torch.from_numpy(labeled),
        anchors=a,
        positives=p,
        negatives=n,
        lr_rates=lr_rates,
    )


# -- optimizer bundle --------------------------------------------------------------

@dataclass
class Optimizers:
    generator: torch.optim.Optimizer
    discriminator: torch.optim.Optimizer | None

    def state_dict(self):
        return {
            "generator": self.generator.state_dict(),
            "discriminator": None if self.discriminator is None else self.discriminator.state_dict(),
        }

    def load_state_dict(self, state):
        self.generator.load_state_dict(state["generator"])
        if self.discriminator is not None and state["discriminator"] is not None:
            self.discriminator.load_state_dict(state["discriminator"])


def make_optimizers(model, config):
    gen = torch.optim.Adam(model.generator_parameters(), lr=config.lr)
    disc = None
    if config.adversarial:
        disc = torch.optim.Adam(model.discriminator_parameters(), lr=config.lr_discriminator,
                                betas=(0.5, 0.999))
    return Optimizers(gen, disc)


# -- one step ----------------------------------------------------------------------

@dataclass
class Forward:
    hr_maps: list
    lr_maps: list | None
    v_hr: torch.Tensor
    v_lr: torch.Tensor | None


def forward_features(model, batch):
    """Run F once over HR and LR jointly so both share batch-norm statistics."""
    if batch.x_lr is None:
        pyr = model.extract(batch.x_hr)
        return Forward(pyr.maps, None, pyr.embedding, None)
    n = batch.x_hr.shape[0]
    pyr = model.extract(torch.cat([batch.x_hr, batch.x_lr]))
    return Forward(
        [m[:n] for m in pyr.maps],
        [m[n:] for m in pyr.maps],
        pyr.embedding[:n],
        pyr.embedding[n:],
    )


def _clip(params, max_norm):
    if max_norm:
        torch.nn.utils.clip_grad_norm_(list(params), max_norm)


def discriminator_update(model, fwd, config, opts):
    """Gradient ascent on the adversarial objective; touches discriminator parameters only.

    Returns the per-level adversarial values before the update.
    """
    if not config.adversarial or fwd.lr_maps is None:
        return {}
    values = {}
    for _ in range(config.discriminator_steps):
        opts.discriminator.zero_grad(set_to_none=True)
        adv = {}
        for j in model.config.discriminator_levels:
            lh = model.discriminator_logit(j, fwd.hr_maps[j - 1].detach())
            ll = model.discriminator_logit(j, fwd.lr_maps[j - 1].detach())
            adv[j] = losses.adversarial_loss_from_logits(lh, ll)
        if not values:
            values = {j: v.detach() for j, v in adv.items()}
        objective = -sum(adv.values())
        objective.backward()
        _clip(model.discriminator_parameters(), config.grad_clip)
        opts.discriminator.step()
    return values


def generator_losses(model, fwd, batch, config):
    """Differentiable (w.r.t. F, G, C) loss terms and the extractor's adversarial objective."""
    terms = {"rec": 0.0, "cls": 0.0, "tri": 0.0}
    gen_adv = {}
    streams = [(fwd.hr_maps, fwd.v_hr, batch.target_hr)]
    if fwd.lr_maps is not None:
        streams.append((fwd.lr_maps, fwd.v_lr, batch.target_lr))
    mask = batch.labeled
    if config.use_rec:
        terms["rec"] = sum(
            (model.decode(maps[-1]) - target).abs().mean() for maps, _, target in streams
        )
    if config.use_cls:
        terms["cls"] = sum(
            losses.masked_cross_entropy(model.classifier_logits(v), batch.labels, mask)
            for _, v, _ in streams
        )
    if config.use_tri:
        terms["tri"] = sum(
            losses.triplet_from_embeddings(
                v, batch.anchors, batch.positives, batch.negatives, config.margin,
                hard=config.batch_hard, labels=batch.labels, mask=mask,
            )
            for _, v, _ in streams
        )
    if config.adversarial and fwd.lr_maps is not None:
        for j in model.config.discriminator_levels:
            lh = model.discriminator_logit(j, fwd.hr_maps[j - 1])
            ll = model.discriminator_logit(j, fwd.lr_maps[j - 1])
            gen_adv[j] = losses.generator_adversarial_loss(lh, ll, config.adv_mode)
    return terms, gen_adv


def generator_update(model, fwd, batch, config, opts, adv_values=None):
    """Descent on the total loss; touches F, G and C only. Returns the step's LossBundle."""
    disc_params = list(model.discriminator_parameters())
    for p in disc_params:
        p.requires_grad_(False)
    try:
        opts.generator.zero_grad(set_to_none=True)
        terms, gen_adv = generator_losses(model, fwd, batch, config)
        obj = losses.total_loss(
            adv=adv_values or {},
            rec=terms["rec"],
            cls=terms["cls"],
            tri=terms["tri"],
            margin=config.margin,
            generator_adv=gen_adv,
            weights={"adv": config.weight_adv, "rec": config.weight_rec,
                     "cls": config.weight_cls, "tri": config.weight_tri},
        )
        if obj.generator.requires_grad:
            obj.generator.backward()
            _clip(model.generator_parameters(), config.grad_clip)
            opts.generator.step()
    finally:
        for p in disc_params:
            p.requires_grad_(True)
    return obj.bundle


def train_step(model, batch, config, opts):
    """One alternating update: (a) discriminators, then (b) extractor/decoder/classifier."""
    if not bool(batch.labeled.any()) and not (config.use_rec or config.adversarial):
        raise ConfigError("batch has no labeled records and only cls/tri are enabled",
                          field="labeled_fraction")
    model.train()
    fwd = forward_features(model, batch)
    adv_values = discriminator_update(model, fwd, config, opts)
    return generator_update(model, fwd, batch, config, opts, adv_values)


# -- full runs ----------------------------------------------------------------------

def set_determinism(enabled):
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def total_steps(config, num_train):
    if config.epochs:
        per_epoch = -(-num_train // (config.identities_per_batch * config.images_per_identity))
        return config.epochs * per_epoch
    return config.steps


def prepare_train_records(dataset, config):
    """Training records with the semi-supervised mask applied."""
    train = list(dataset.train)
    if config.labeled_fraction < 1.0:
        train = mask_labels(train, config.labeled_fraction, seed=config.seed)
    return train


def _batch_stream(train, config, rng, cache, start, stop):
    """Yield batches for steps [start, stop); prefetched on a thread when workers > 1.

    The single RNG is consumed in step order either way, so the sequence of
    batches does not depend on ``workers``.
    """
    if config.workers <= 1:
        for _ in range(start, stop):
            yield make_batch(train, config, rng, cache)
        return
    q = queue.Queue(maxsize=2 * config.workers)
    done = object()

    def produce():
        for _ in range(start, stop):
            q.put(make_batch(train, config, rng, cache))
        q.put(done)

    t = threading.Thread(target=produce, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    t.join()


@dataclass
class RunResult:
    model: RainModel
    history: TrainHistory
    checkpoint: Path | None = None


def _save_state(path, model, opts, rng, step, history, config):
    save_checkpoint(
        path,
        model,
        extra={
            "train_config": json.dumps(config.to_dict(), sort_keys=True),
            "step": step,
            "optimizers": opts.state_dict(),
            "rng_state": rng.bit_generator.state,
            "history": {"steps": history.steps, "seconds": history.seconds,
                        "evals": [(s, r.to_dict()) for s, r in history.evals]},
        },
    )


def train(config, dataset, model_config=None, out_dir=None, resume_from=None,
          stop_after=None, checkpoint_every=0):
    """Train a model on ``dataset.train``; evaluate periodically on query/gallery.

    ``stop_after`` ends the run early after that many steps (used together with
    ``resume_from`` to test resumption). With ``out_dir`` the run writes
    ``metrics.jsonl``, ``timings.jsonl``, ``eval/step_XXXXXX.json`` and
    ``checkpoint.final``.
    """
    set_determinism(config.deterministic)
    train_records = prepare_train_records(dataset, config)
    n_train_ids = len({r.identity for r in train_records})
    if model_config is None:
        model_config = ModelConfig(num_identities=n_train_ids,
                                   height=train_records[0].shape[0], width=train_records[0].shape[1])
    if max(r.identity for r in train_records) >= model_config.num_identities:
        raise InvalidArgumentError("training identities exceed the classifier's vocabulary")

    torch.manual_seed(config.seed)
    model = RainModel(model_config)
    opts = make_optimizers(model, config)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    start = 1
    if resume_from is not None:
        model, payload = load_checkpoint(resume_from, model_config)
        opts = make_optimizers(model, config)
        opts.load_state_dict(payload["optimizers"])
        rng.bit_generator.state = payload["rng_state"]
        h = payload["history"]
        history = TrainHistory(steps=list(h["steps"]), seconds=list(h["seconds"]),
                               evals=[(s, EvalReport.from_dict(r)) for s, r in h["evals"]])
        start = int(payload["step"]) + 1

    n_steps = total_steps(config, len(train_records))
    stop = n_steps if stop_after is None else min(n_steps, stop_after)
    cfg_fp = fingerprint(config.to_dict(), model_config.to_dict())

    out = Path(out_dir) if out_dir else None
    metrics_fh = timings_fh = None
    if out:
        (out / "eval").mkdir(parents=True, exist_ok=True)
        mode = "a" if resume_from is not None else "w"
        metrics_fh = open(out / "metrics.jsonl", mode)
        timings_fh = open(out / "timings.jsonl", mode)
    cache = LrTwinCache(train_records)
    try:
        step = start - 1
        for step, batch in enumerate(_batch_stream(train_records, config, rng, cache, start, stop + 1),
                                     start=start):
            t0 = time.perf_counter()
            bundle = train_step(model, batch, config, opts)
            dt = time.perf_counter() - t0
            values = [bundle.rec, bundle.cls, bundle.tri, *bundle.adv.values()]
            if not all(np.isfinite(values)):
                if metrics_fh:
                    metrics_fh.write(json.dumps({"step": step, "abort": "non-finite loss",
                                                 **bundle.to_record(step)}) + "\n")
                raise TrainingAborted(f"non-finite loss at step {step}", step)
            history.append(step, bundle, dt)
            if metrics_fh:
                metrics_fh.write(json.dumps(bundle.to_record(step), sort_keys=True) + "\n")
                timings_fh.write(json.dumps({"step": step, "seconds": dt}) + "\n")
            if config.eval_every and step % config.eval_every == 0 and dataset.query:
                report = evaluate(model, dataset.query, dataset.gallery,
                                  normalize=config.normalize_embeddings, config_fingerprint=cfg_fp)
                history.evals.append((step, report))
                if out:
                    report.write(out / "eval" / f"step_{step:06d}.json")
            if out and checkpoint_every and step % checkpoint_every == 0:
                _save_state(out / f"checkpoint.step{step:06d}", model, opts, rng, step, history, config)
        ckpt = None
        if out:
            ckpt = out / ("checkpoint.final" if step >= n_steps else f"checkpoint.step{step:06d}")
            _save_state(ckpt, model, opts, rng, step, history, config)
    finally:
        if metrics_fh:
            metrics_fh.close()
            timings_fh.close()
    model.eval()
    return RunResult(model=model, history=history, checkpoint=ckpt)


# -- ablations ----------------------------------------------------------------------

ABLATION_VARIANTS = (
    "full",
    "no_adv",
    "no_rec",
    "no_cls",
    "no_tri",
    "single_level",
    "hr_only",
    "hr_lr_no_adv",
    "rate_2",
    "rate_3",
    "rate_4",
    "rate_multi",
)


def variant_configs(base, model_config, name):
    """(TrainConfig, ModelConfig) for a named ablation variant."""
    mc = model_config
    if name == "full":
        return base, mc
    if name in ("no_adv", "hr_lr_no_adv"):
        return replace(base, use_adv=False), mc
    if name == "no_rec":
        return replace(base, use_rec=False), mc
    if name == "no_cls":
        return replace(base, use_cls=False), mc
    if name == "no_tri":
        return replace(base, use_tri=False), mc
    if name == "single_level":
        return base, replace(mc, discriminator_levels=(mc.num_blocks,))
    if name == "hr_only":
        return replace(base, train_on_lr=False, use_adv=False), mc
    if name.startswith("rate_"):
        tail = name[len("rate_"):]
        rates = (2, 3, 4) if tail == "multi" else (int(tail),)
        return replace(base, rates=rates), mc
    raise InvalidArgumentError(f"unknown ablation variant {name!r}")


def run_ablation_suite(base_config, dataset, model_config=None, variants=ABLATION_VARIANTS,
                       ranks=(1, 5, 10, 20)):
    """Train each variant and evaluate it; identical effective configs are trained once.

    Returns a list of ``(variant, EvalReport)`` rows in ``variants`` order.
    """
    if model_config is None:
        model_config = ModelConfig(num_identities=len(dataset.train_identities),
                                   height=dataset.train[0].shape[0], width=dataset.train[0].shape[1])
    done = {}
    rows = []
    for name in variants:
        tc, mc = variant_configs(base_config, model_config, name)
        key = fingerprint(tc.to_dict(), mc.to_dict())
        if key not in done:
            result = train(tc, dataset, mc)
            done[key] = evaluate(result.model, dataset.query, dataset.gallery, ranks=ranks,
                                 normalize=tc.normalize_embeddings, config_fingerprint=key)
        rows.append((name, done[key]))
    return rows
