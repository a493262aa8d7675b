"""Experiment spec files: YAML documents with a versioned schema.

See ``docs/config.md`` for the field reference. Loading resolves the dataset
reference, applies ``RAIN_<BLOCK>__<FIELD>`` environment overrides, and
validates every field; problems raise :class:`ConfigError` carrying the
offending field path and, when known, the source line.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from rainreid.errors import ConfigError, InvalidArgumentError
from rainreid.model import ModelConfig
from rainreid.training import ABLATION_VARIANTS, TrainConfig

SCHEMA_VERSION = 1
ENV_PREFIX = "RAIN_"

_INT, _FLOAT, _BOOL, _STR = "int", "float", "bool", "str"
_INTS, _FLOATS, _STRS = "ints", "floats", "strs"


@dataclass
class DatasetSpec:
    kind: str = "toy"
    num_identities: int = 20
    images_per_identity: int = 10
    side: int = 32
    num_cameras: int = 2
    noise: float = 0.03
    root: str | None = None
    rates: tuple[int, ...] = (2, 3, 4)
    lr_cameras: tuple[int, ...] = (1,)
    per_image: bool = True
    num_test_identities: int | None = None


@dataclass
class EvalSpec:
    ranks: tuple[int, ...] = (1, 5, 10, 20)
    normalize: bool = True
    keep_ranks: int = 10
    probe_rates: tuple[int, ...] = ()
    invariance_probe: bool = True
    fractions: tuple[float, ...] = (0.2, 0.6, 1.0)
    variants: tuple[str, ...] = ABLATION_VARIANTS


DATASET_SCHEMA = {
    "kind": _STR, "num_identities": _INT, "images_per_identity": _INT, "side": _INT,
    "num_cameras": _INT, "noise": _FLOAT, "root": _STR, "rates": _INTS, "lr_cameras": _INTS,
    "per_image": _BOOL, "num_test_identities": _INT,
}
MODEL_SCHEMA = {
    "num_blocks": _INT, "stem_channels": _INT, "channels": _INTS, "strides": _INTS,
    "discriminator_levels": _INTS, "decoder_channels": _INT, "discriminator_channels": _INT,
}
EVAL_SCHEMA = {
    "ranks": _INTS, "normalize": _BOOL, "keep_ranks": _INT, "probe_rates": _INTS,
    "invariance_probe": _BOOL, "fractions": _FLOATS, "variants": _STRS,
}
TRAIN_SCHEMA = {
    "steps": _INT, "epochs": _INT, "identities_per_batch": _INT, "images_per_identity": _INT,
    "lr": _FLOAT, "lr_discriminator": _FLOAT, "margin": _FLOAT, "rates": _INTS,
    "train_on_lr": _BOOL, "use_adv": _BOOL, "use_rec": _BOOL, "use_cls": _BOOL, "use_tri": _BOOL,
    "weight_adv": _FLOAT, "weight_rec": _FLOAT, "weight_cls": _FLOAT, "weight_tri": _FLOAT,
    "adv_mode": _STR, "discriminator_steps": _INT, "grad_clip": _FLOAT, "batch_hard": _BOOL,
    "labeled_fraction": _FLOAT, "eval_every": _INT, "normalize_embeddings": _BOOL,
    "deterministic": _BOOL, "workers": _INT,
}
# fields that accept an explicit null
_NULLABLE = {"root", "num_test_identities", "epochs", "grad_clip", "strides"}
TOP_LEVEL = ("schema_version", "name", "seed", "dataset", "datasets", "model", "train", "eval")


@dataclass
class ExperimentSpec:
    name: str
    seed: int
    dataset_name: str
    dataset: DatasetSpec
    model: dict
    train: TrainConfig
    eval: EvalSpec = field(default_factory=EvalSpec)
    source: str | None = None

    def model_config(self, num_identities):
        return ModelConfig(num_identities=num_identities, height=self.dataset.side,
                           width=self.dataset.side, **self.model)

    def with_overrides(self, seed=None, workers=None, deterministic=None):
        """Copy with command-line globals applied."""
        seed = self.seed if seed is None else int(seed)
        train = dataclasses.replace(
            self.train,
            seed=seed,
            workers=self.train.workers if workers is None else int(workers),
            deterministic=self.train.deterministic if deterministic is None else bool(deterministic),
        )
        return dataclasses.replace(self, seed=seed, train=train)

    def to_dict(self):
        ds = dataclasses.asdict(self.dataset)
        ev = dataclasses.asdict(self.eval)
        tr = self.train.to_dict()
        tr.pop("seed")
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "seed": self.seed,
            "dataset": self.dataset_name,
            "datasets": {self.dataset_name: {k: list(v) if isinstance(v, tuple) else v
                                             for k, v in ds.items()}},
            "model": {k: list(v) if isinstance(v, tuple) else v for k, v in self.model.items()},
            "train": tr,
            "eval": {k: list(v) if isinstance(v, tuple) else v for k, v in ev.items()},
        }


# -- parsing helpers ---------------------------------------------------------------

class _Lines:
    """Maps dotted field paths to 1-based source lines using the YAML node tree."""

    def __init__(self, text):
        self.lines = {}
        try:
            node = yaml.compose(text)
        except yaml.YAMLError:
            node = None
        if node is not None:
            self._walk(node, "")

    def _walk(self, node, prefix):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                path = f"{prefix}.{key.value}" if prefix else str(key.value)
                self.lines[path] = key.start_mark.line + 1
                self._walk(value, path)

    def get(self, path):
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path.rpartition(".")[0]
        return None


def _coerce(value, kind, path, lines):
    def fail(msg):
        raise ConfigError(msg, field=path, line=lines.get(path))

    if value is None:
        if path.rpartition(".")[2] in _NULLABLE:
            return None
        fail("value must not be null")
    if kind == _BOOL:
        if not isinstance(value, bool):
            fail(f"expected true/false, got {value!r}")
        return value
    if kind == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            fail(f"expected an integer, got {value!r}")
        return value
    if kind == _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail(f"expected a number, got {value!r}")
        return float(value)
    if kind == _STR:
        if not isinstance(value, str):
            fail(f"expected a string, got {value!r}")
        return value
    if not isinstance(value, list):
        fail(f"expected a list, got {value!r}")
    item = {_INTS: _INT, _FLOATS: _FLOAT, _STRS: _STR}[kind]
    return tuple(_coerce(v, item, path, lines) for v in value)


def _block(raw, name, schema, lines):
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("expected a mapping", field=name, line=lines.get(name))
    out = {}
    for key, value in raw.items():
        path = f"{name}.{key}"
        if key not in schema:
            raise ConfigError(f"unknown field; allowed: {', '.join(sorted(schema))}",
                              field=path, line=lines.get(path))
        out[key] = _coerce(value, schema[key], path, lines)
    return out


def _parse_env_value(text):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_env_overrides(raw, environ=None):
    """Apply ``RAIN_<BLOCK>__<FIELD>=value`` (or ``RAIN_<KEY>`` for top-level keys).

    Values are parsed as YAML scalars/flow lists, so ``RAIN_TRAIN__RATES='[2, 4]'`` works.
    Returns the list of applied dotted paths.
    """
    environ = os.environ if environ is None else environ
    applied = []
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not parts or parts[0] not in TOP_LEVEL:
            continue
        target = raw
        for p in parts[:-1]:
            nxt = target.get(p)
            if not isinstance(nxt, dict):
                nxt = target[p] = {}
            target = nxt
        target[parts[-1]] = _parse_env_value(environ[key])
        applied.append(".".join(parts))
    return applied


# -- validation ----------------------------------------------------------------------

def _validate_dataset(ds, path, lines):
    def fail(field_, msg):
        p = f"{path}.{field_}"
        raise ConfigError(msg, field=p, line=lines.get(p))

    if ds.kind not in ("toy", "folder", "manifest"):
        fail("kind", f"unknown dataset kind {ds.kind!r}; use toy, folder or manifest")
    if ds.kind in ("folder", "manifest") and not ds.root:
        fail("root", f"{ds.kind} datasets need a root path")
    if not ds.rates or min(ds.rates) < 1:
        fail("rates", "rates must be integers >= 1")
    for name in ("num_identities", "images_per_identity", "side", "num_cameras"):
        if getattr(ds, name) < 1:
            fail(name, "must be >= 1")
    if ds.kind == "toy" and ds.num_identities < 2:
        fail("num_identities", "need at least 2 identities")
    if ds.noise < 0:
        fail("noise", "must be >= 0")
    if ds.num_test_identities is not None and not 1 <= ds.num_test_identities < ds.num_identities:
        fail("num_test_identities", "must lie in [1, num_identities)")


def _validate_eval(ev, lines):
    def fail(field_, msg):
        p = f"eval.{field_}"
        raise ConfigError(msg, field=p, line=lines.get(p))

    if not ev.ranks or min(ev.ranks) < 1:
        fail("ranks", "ranks must be integers >= 1")
    if any(r < 2 for r in ev.probe_rates):
        fail("probe_rates", "probe rates must be integers >= 2")
    if any(not 0.0 <= f <= 1.0 for f in ev.fractions):
        fail("fractions", "fractions must lie in [0, 1]")
    if list(ev.fractions) != sorted(set(ev.fractions)):
        fail("fractions", "fractions must be distinct and sorted ascending")
    unknown = [v for v in ev.variants if v not in ABLATION_VARIANTS]
    if unknown:
        fail("variants", f"unknown variants {unknown}; known: {', '.join(ABLATION_VARIANTS)}")
    if ev.keep_ranks < 0:
        fail("keep_ranks", "must be >= 0")


def parse_spec(text, source=None, environ=None):
    """Parse and validate a spec document. Raises :class:`ConfigError`."""
    lines = _Lines(text)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark else None) from None
    if not isinstance(raw, dict):
        raise ConfigError("spec must be a mapping at the top level", line=1)
    apply_env_overrides(raw, environ)

    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(f"unknown top-level field; allowed: {', '.join(TOP_LEVEL)}",
                              field=str(key), line=lines.get(str(key)))
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}",
                          field="schema_version", line=lines.get("schema_version"))
    name = _coerce(raw.get("name", Path(source).stem if source else "experiment"), _STR, "name", lines)
    seed = _coerce(raw.get("seed", 0), _INT, "seed", lines)

    # dataset: either an inline mapping or the name of an entry under `datasets`
    declared = raw.get("datasets") or {}
    if not isinstance(declared, dict):
        raise ConfigError("expected a mapping of named datasets", field="datasets",
                          line=lines.get("datasets"))
    ref = raw.get("dataset")
    if isinstance(ref, dict):
        ds_name, ds_raw, ds_path = "inline", ref, "dataset"
    elif isinstance(ref, str):
        if ref not in declared:
            raise ConfigError(f"dataset {ref!r} is not declared under 'datasets' "
                              f"(declared: {sorted(declared) or 'none'})",
                              field="dataset", line=lines.get("dataset"))
        ds_name, ds_raw, ds_path = ref, declared[ref], f"datasets.{ref}"
    elif ref is None and len(declared) == 1:
        ds_name, ds_raw = next(iter(declared.items()))
        ds_path = f"datasets.{ds_name}"
    else:
        raise ConfigError("missing dataset: give a mapping or the name of a declared dataset",
                          field="dataset", line=lines.get("dataset"))
    fields = _block(ds_raw, ds_path, DATASET_SCHEMA, lines)
    # _block reports paths under ds_path; DatasetSpec wants bare names
    dataset = DatasetSpec(**fields)
    dataset.rates = tuple(sorted(set(dataset.rates)))
    _validate_dataset(dataset, ds_path, lines)

    model = _block(raw.get("model"), "model", MODEL_SCHEMA, lines)
    try:
        ModelConfig(num_identities=1, height=dataset.side, width=dataset.side, **model)
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), field="model", line=lines.get("model")) from None

    train_fields = _block(raw.get("train"), "train", TRAIN_SCHEMA, lines)
    train_fields.setdefault("rates", dataset.rates)
    try:
        train = TrainConfig(seed=seed, **train_fields)
    except ConfigError as exc:
        path = f"train.{exc.field}" if exc.field else "train"
        raise ConfigError(exc.message, field=path, line=lines.get(path)) from None

    ev = EvalSpec(**_block(raw.get("eval"), "eval", EVAL_SCHEMA, lines))
    _validate_eval(ev, lines)
    return ExperimentSpec(name=name, seed=seed, dataset_name=ds_name, dataset=dataset,
                          model=model, train=train, eval=ev, source=source)


def load_spec(path, environ=None):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc.strerror}") from None
    return parse_spec(text, source=str(path), environ=environ)


def bundled_spec(name):
    """Path of a reference spec shipped with the package (``toy_full`` etc.)."""
    path = Path(__file__).with_name("specs") / f"{name}.spec"
    if not path.exists():
        available = sorted(p.stem for p in path.parent.glob("*.spec"))
        raise ConfigError(f"no bundled spec {name!r}; available: {', '.join(available)}")
    return path
