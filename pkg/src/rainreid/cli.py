"""Command-line entry point: ``rainreid <command> SPEC``.

Exit codes: 0 success, 1 runtime abort, 2 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from rainreid.config import bundled_spec, load_spec
from rainreid.datagen import (
    CameraPolicy,
    load_image_folder,
    make_toy_corpus,
    read_manifest,
    synthesize_mlr,
    write_manifest,
)
from rainreid.errors import (
    CheckpointError,
    ConfigError,
    InvalidArgumentError,
    ProtocolError,
    RainError,
    TrainingAborted,
)
from rainreid.evaluation import (
    embed_set,
    evaluate,
    export_embeddings,
    fingerprint,
    invariance_probe,
    twin_pairs,
    unseen_resolution_eval,
    validate_report,
)
from rainreid.model import load_checkpoint
from rainreid.training import run_ablation_suite, train, variant_configs

log = logging.getLogger("rainreid")

EXIT_OK, EXIT_ABORT, EXIT_INVALID = 0, 1, 2


# -- pipeline pieces ----------------------------------------------------------------

def resolve_spec(name_or_path, args=None):
    """Load a spec file, or a bundled spec by name, and apply global flags."""
    if name_or_path is None:
        raise ConfigError("no spec given; pass a spec file or --config", field="spec")
    path = Path(name_or_path)
    if not path.exists() and not path.suffix:
        path = bundled_spec(name_or_path)
    spec = load_spec(path)
    if args is not None:
        spec = spec.with_overrides(seed=args.seed, workers=args.workers,
                                   deterministic=args.deterministic)
    return spec


def build_dataset(spec):
    ds = spec.dataset
    if ds.kind == "manifest":
        return read_manifest(ds.root)
    if ds.kind == "folder":
        records = load_image_folder(ds.root)
    else:
        records = make_toy_corpus(ds.num_identities, ds.images_per_identity, ds.side,
                                  seed=spec.seed, num_cameras=ds.num_cameras, noise=ds.noise)
    policy = CameraPolicy(lr_cameras=frozenset(ds.lr_cameras), per_image=ds.per_image)
    return synthesize_mlr(records, set(ds.rates), policy, seed=spec.seed,
                          num_test_identities=ds.num_test_identities)


def write_report(report, path):
    validate_report(report.to_dict())
    report.write(path)


def write_cmc_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "cmc"])
        for k, v in sorted(report.cmc.items()):
            w.writerow([k, f"{v:.6f}"])


def write_loss_curve(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "adv_sum", "rec", "cls", "tri", "total"])
        for rec in history.steps:
            w.writerow([rec["step"]] + [repr(rec[k]) for k in ("adv_sum", "rec", "cls", "tri", "total")])


def write_rank_lists(report, query, gallery, path):
    """Top-ranked gallery identities per query (plot data for ranked-list figures)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        k = len(report.per_query_ranks[0]) if report.per_query_ranks else 0
        w.writerow(["query", "identity", "rate"] + [f"top{i + 1}" for i in range(k)])
        for qi, (rec, ranked) in enumerate(zip(query, report.per_query_ranks)):
            w.writerow([qi, rec.identity, rec.rate] + [gallery[j].identity for j in ranked])


def evaluate_all(spec, model, dataset, out):
    """Standard report plus optional unseen-rate reports and the invariance probe."""
    ev = spec.eval
    key = fingerprint(spec.to_dict())
    report = evaluate(model, dataset.query, dataset.gallery, ranks=ev.ranks,
                      normalize=ev.normalize, keep_ranks=ev.keep_ranks, config_fingerprint=key)
    summary = {"rank1": report.rank1, "map": report.map}
    if out:
        write_report(report, out / "report.json")
        write_cmc_csv(report, out / "cmc.csv")
        write_rank_lists(report, dataset.query, dataset.gallery, out / "rank_lists.csv")
    for rate in ev.probe_rates:
        unseen = unseen_resolution_eval(
            model, dataset.query + dataset.gallery, spec.train.rates, rate, ranks=ev.ranks,
            normalize=ev.normalize, lr_cameras=spec.dataset.lr_cameras, seed=spec.seed,
            gallery=dataset.gallery,
        )
        unseen.fingerprint = key
        summary[f"rank1_r{rate}"] = unseen.rank1
        if out:
            write_report(unseen, out / f"report_r{rate}.json")
    if ev.invariance_probe:
        hr, lr = twin_pairs(dataset.query + dataset.gallery, spec.train.rates, seed=spec.seed)
        dist, acc = invariance_probe(model, hr, lr, normalize=ev.normalize, seed=spec.seed)
        summary["probe_accuracy"] = acc
        summary["probe_twin_distance"] = dist
        if out:
            (out / "probe.json").write_text(
                json.dumps({"accuracy": acc, "twin_distance": dist}, indent=1, sort_keys=True) + "\n")
    return report, summary


def semi_sweep(spec, dataset, fractions=None, out=None):
    """One model per labeled fraction; returns rows (fraction, rank1, map)."""
    fractions = sorted(spec.eval.fractions if fractions is None else fractions)
    if any(not 0.0 <= f <= 1.0 for f in fractions):
        raise ConfigError("fractions must lie in [0, 1]", field="fractions")
    mc = spec.model_config(len(dataset.train_identities))
    rows = []
    for f in fractions:
        tc = replace(spec.train, labeled_fraction=float(f))
        run_dir = out / f"fraction_{f:.2f}" if out else None
        result = train(tc, dataset, mc, out_dir=run_dir)
        report = evaluate(result.model, dataset.query, dataset.gallery, ranks=spec.eval.ranks,
                          normalize=spec.eval.normalize, keep_ranks=spec.eval.keep_ranks)
        if run_dir:
            write_report(report, run_dir / "report.json")
        rows.append((float(f), report.rank1, report.map))
    if out:
        with open(out / "semi_sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fraction", "rank1", "map"])
            for f, r1, m in rows:
                w.writerow([f"{f:.2f}", f"{r1:.6f}", f"{m:.6f}"])
    return rows


# -- commands ------------------------------------------------------------------------

def _int_list(text, flag):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as integers", field=flag) from None


def _out_dir(args, spec, sub=None):
    out = Path(args.out) if args.out else Path("runs") / spec.name
    if sub:
        out = out / sub
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(spec, out):
    (out / "spec.resolved.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")


def cmd_synth(args):
    spec = resolve_spec(args.spec, args)
    out = _out_dir(args, spec)
    manifest = write_manifest(build_dataset(spec), out / "dataset")
    print(manifest)


def cmd_train(args):
    spec = resolve_spec(args.spec, args)
    out = _out_dir(args, spec)
    _write_resolved(spec, out)
    dataset = build_dataset(spec)
    tc, mc = variant_configs(spec.train, spec.model_config(len(dataset.train_identities)),
                             args.variant)
    result = train(tc, dataset, mc, out_dir=out, resume_from=args.resume)
    write_loss_curve(result.history, out / "loss_curve.csv")
    report, summary = evaluate_all(spec, result.model, dataset, out)
    print(json.dumps(summary, sort_keys=True))


def cmd_eval(args):
    spec = resolve_spec(args.spec, args)
    if args.ranks:
        ranks = _int_list(args.ranks, "--ranks")
        if min(ranks) < 1:
            raise ConfigError("ranks must be >= 1", field="--ranks")
        spec = replace(spec, eval=replace(spec.eval, ranks=tuple(ranks)))
    report_path = None
    if args.out and args.out.endswith(".json"):
        report_path = Path(args.out)
        args.out = str(report_path.parent / (report_path.stem + "_files"))
    out = _out_dir(args, spec)
    dataset = read_manifest(args.dataset) if args.dataset else build_dataset(spec)
    model, _ = load_checkpoint(args.checkpoint)
    report, summary = evaluate_all(spec, model, dataset, out)
    if report_path:
        write_report(report, report_path)
    print(json.dumps(summary, sort_keys=True))


def cmd_ablate(args):
    spec = resolve_spec(args.spec, args)
    out = _out_dir(args, spec)
    _write_resolved(spec, out)
    dataset = build_dataset(spec)
    variants = args.variants.split(",") if args.variants else spec.eval.variants
    rows = run_ablation_suite(spec.train, dataset, spec.model_config(len(dataset.train_identities)),
                              variants=variants, ranks=spec.eval.ranks)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        ranks = sorted(spec.eval.ranks)
        w.writerow(["variant"] + [f"rank{k}" for k in ranks] + ["map"])
        for name, rep in rows:
            w.writerow([name] + [f"{rep.cmc[k]:.6f}" for k in ranks] + [f"{rep.map:.6f}"])
            write_report(rep, out / f"report_{name}.json")
    for name, rep in rows:
        print(f"{name:14s} rank1={rep.rank1:6.2f} mAP={rep.map:.4f}")


def cmd_semi_sweep(args):
    spec = resolve_spec(args.spec, args)
    out = _out_dir(args, spec)
    _write_resolved(spec, out)
    fractions = None
    if args.fractions:
        try:
            fractions = [float(x) for x in args.fractions.split(",")]
        except ValueError:
            raise ConfigError(f"cannot parse fractions {args.fractions!r}", field="--fractions") from None
    for f, r1, m in semi_sweep(spec, build_dataset(spec), fractions, out):
        print(f"fraction={f:.2f} rank1={r1:6.2f} mAP={m:.4f}")


def cmd_export(args):
    spec = resolve_spec(args.spec, args)
    out = _out_dir(args, spec)
    dataset = build_dataset(spec)
    model, _ = load_checkpoint(args.checkpoint)
    records = []
    for split in args.splits.split(","):
        if split not in ("train", "query", "gallery"):
            raise ConfigError(f"unknown split {split!r}", field="--splits")
        records += getattr(dataset, split)
    emb = embed_set(model, records, normalize=spec.eval.normalize)
    path = out / "embeddings.csv"
    export_embeddings(path, emb, [r.identity for r in records], [r.rate for r in records])
    print(path)


def cmd_run(args):
    spec = resolve_spec(args.spec, args)
    out = _out_dir(args, spec)
    _write_resolved(spec, out)
    dataset = build_dataset(spec)
    write_manifest(dataset, out / "dataset")
    result = train(spec.train, dataset, spec.model_config(len(dataset.train_identities)),
                   out_dir=out)
    write_loss_curve(result.history, out / "loss_curve.csv")
    _, summary = evaluate_all(spec, result.model, dataset, out)
    print(json.dumps(summary, sort_keys=True))


def build_parser():
    p = argparse.ArgumentParser(prog="rainreid", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.add_argument("--out", default=None, help="output directory (default runs/<name>)")
    p.add_argument("--workers", type=int, default=None, help="batch prefetch threads")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="force deterministic kernels and a single compute thread")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("spec", nargs="?", help="spec file, or the name of a bundled spec (e.g. toy_full)")
        sp.add_argument("--config", dest="config", default=None, help="alternative to the positional spec")
        sp.set_defaults(func=func)
        return sp

    add("synth", cmd_synth, "synthesize the dataset and write a manifest")
    sp = add("train", cmd_train, "train one model and evaluate it")
    sp.add_argument("--variant", default="full", help="ablation variant to train")
    sp.add_argument("--resume", default=None, help="checkpoint to resume from")
    sp = add("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", default=None, help="manifest.jsonl to evaluate on instead of the spec dataset")
    sp.add_argument("--ranks", default=None, help="comma-separated CMC ranks, e.g. 1,5,10,20")
    sp = add("ablate", cmd_ablate, "train and evaluate the ablation variants")
    sp.add_argument("--variants", default=None, help="comma-separated subset")
    sp = add("semi-sweep", cmd_semi_sweep, "rank-1 / mAP versus labeled fraction")
    sp.add_argument("--fractions", default=None, help="comma-separated, e.g. 0,0.2,0.6,1")
    sp = add("export-embeddings", cmd_export, "dump embeddings as CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--splits", default="query,gallery")
    add("run", cmd_run, "synthesize, train, evaluate and report")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        if args.spec:
            parser.error("give the spec either positionally or with --config, not both")
        args.spec = args.config
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None and args.workers < 1:
        print("error: field '--workers': must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        args.func(args)
    except (ConfigError, InvalidArgumentError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingAborted, CheckpointError, RainError, OSError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
