"""Experiment configuration: YAML schema, presets and validation.

A config file is a YAML mapping. Omitted keys take the preset's values
(``preset: mnist`` by default). Every problem is reported with the dotted key
and the line it came from. ``config.resolved.json`` written by a run is itself
a valid config file (JSON is a subset of YAML), so any run can be reproduced
from that file alone.

Example::

    seed: 1
    preset: mnist
    federation: {rounds: 136, warmup_rounds: 150}
    data: {kind: synthetic, train_per_class: 1000}
    attack: {strategy: FC, start_round: 2}
    defense: {clip: 5.0}
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import yaml

from .data import SynthParams
from .defense import DefenseConfig
from .errors import ConfigParseError, ConfigurationError
from .federation import AttackConfig, EvalConfig, FederationConfig
from .trigger import TriggerStrategy

SCHEMA_VERSION = 1

PRESETS: dict[str, dict] = {
    "mnist": {
        "federation": {"lr": 0.1, "local_epochs": 1},
        "data": {"classes": 10, "dims": [28, 28, 1], "train_subset": 50000},
        "attack": {"lr": 0.05, "epochs": 10, "r": 3, "target": 2, "start_round": 2,
                   "trigger": {"size": 4, "gap": 2, "location": 0}},
    },
    "cifar10": {
        "federation": {"lr": 0.1, "local_epochs": 2},
        "data": {"classes": 10, "dims": [32, 32, 3], "train_subset": 50000},
        "attack": {"lr": 0.05, "epochs": 6, "r": 2, "target": 2, "start_round": 314,
                   "trigger": {"size": 6, "gap": 3, "location": 0}},
    },
    "gtsrb": {
        "federation": {"lr": 0.1, "local_epochs": 1},
        "data": {"classes": 16, "dims": [32, 32, 3], "train_subset": 23050},
        "attack": {"lr": 0.05, "epochs": 10, "r": 4, "target": None, "start_round": 154,
                   "trigger": {"size": 6, "gap": 3, "location": 0}},
    },
}

# ------------------------------------------------------------ value checkers


def _int(v, key):
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError(f"expected an integer, got {v!r}")
    return v


def _float(v, key):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        if isinstance(v, str) and v.strip().lower() in ("inf", "infinity", ".inf"):
            return math.inf
        raise TypeError(f"expected a number, got {v!r}")
    return float(v)


def _bool(v, key):
    if not isinstance(v, bool):
        raise TypeError(f"expected true/false, got {v!r}")
    return v


def _str(v, key):
    if not isinstance(v, str):
        raise TypeError(f"expected a string, got {v!r}")
    return v


def _optional(check):
    def inner(v, key):
        return None if v is None else check(v, key)
    return inner


def _int_list(v, key):
    if not isinstance(v, list):
        raise TypeError(f"expected a list of integers, got {v!r}")
    return [_int(x, key) for x in v]


def _dims(v, key):
    dims = _int_list(v, key)
    if len(dims) != 3 or min(dims) < 1:
        raise TypeError(f"expected [H, W, C], got {v!r}")
    return dims


def _location(v, key):
    if isinstance(v, int) and not isinstance(v, bool):
        return v
    if isinstance(v, list) and len(v) == 2:
        return _int_list(v, key)
    raise TypeError(f"expected an integer or [x, y], got {v!r}")


def _float_pair(v, key):
    if not isinstance(v, list) or len(v) != 2:
        raise TypeError(f"expected [low, high], got {v!r}")
    return [_float(x, key) for x in v]


def _choice(*options):
    def inner(v, key):
        if not isinstance(v, str) or v not in options:
            raise TypeError(f"expected one of {', '.join(options)}, got {v!r}")
        return v
    return inner


def _strategy(v, key):
    try:
        return TriggerStrategy.parse(_str(v, key)).value
    except ConfigurationError as exc:
        raise TypeError(str(exc)) from None


Checker = Callable[[Any, str], Any]

SCHEMA: dict[str, Any] = {
    "seed": _int,
    "preset": _choice(*PRESETS),
    "schema_version": _int,
    "federation": {
        "clients": _int, "per_round": _int, "eta": _float, "rounds": _int, "lr": _float,
        "local_epochs": _int, "batch_size": _int, "warmup_rounds": _int, "workers": _int, "momentum": _float,
    },
    "model": {
        "arch": _choice("cnn", "mlp", "logistic"), "conv1": _int, "conv2": _int, "kernel": _int,
        "hidden": _int,
    },
    "data": {
        "kind": _choice("synthetic", "idx"), "alpha": _float, "partition_seed": _optional(_int),
        "train_images": _optional(_str), "train_labels": _optional(_str),
        "test_images": _optional(_str), "test_labels": _optional(_str),
        "train_subset": _optional(_int), "test_subset": _optional(_int),
        "classes": _int, "dims": _dims, "train_per_class": _int, "test_per_class": _int,
        "synthetic": {
            "blobs": _int, "blob_sigma": _float, "margin": _int, "noise": _float, "jitter": _int,
            "contrast": _float_pair, "background": _float, "deform": _float,
        },
    },
    "attack": {
        "strategy": _strategy, "m": _int, "gamma": _optional(_float), "r": _int, "interval": _int,
        "target": _optional(_int), "lr": _float, "epochs": _int, "start_round": _int,
        "malicious": _optional(_int_list), "replacement": _choice("approx", "exact"),
        "clip_aware": _bool, "attackers": _optional(_int), "injections": _optional(_int),
        "trigger": {"size": _int, "gap": _int, "location": _location, "pixel_value": _float},
    },
    "defense": {
        "clip": _optional(_float), "sigma": _optional(_float), "noise_seed": _optional(_int),
        "start_round": _int,
    },
    "eval": {
        "offsets": _int_list, "cadence_pre": _int, "cadence_post": _int, "feature_samples": _int,
        "feature_pairing": _choice("all", "matched"), "feature_class": _optional(_int),
    },
    "output": {"dir": _str},
}

BASE: dict[str, Any] = {
    "federation": {"clients": 100, "per_round": 10, "eta": 0.1, "rounds": 136, "lr": 0.1, "local_epochs": 1,
                   "batch_size": 64, "warmup_rounds": 0, "workers": 1, "momentum": 0.9},
    "model": {"arch": "cnn", "conv1": 16, "conv2": 32, "kernel": 5, "hidden": 128},
    "data": {"kind": "synthetic", "alpha": 0.5, "partition_seed": None, "train_images": None, "train_labels": None,
             "test_images": None, "test_labels": None, "train_subset": None, "test_subset": None,
             "classes": 10, "dims": [28, 28, 1], "train_per_class": 1000, "test_per_class": 100,
             "synthetic": {f.name: (list(f.default) if isinstance(f.default, tuple) else f.default)
                           for f in dataclasses.fields(SynthParams)}},
    "attack": {"strategy": "FC", "m": 4, "gamma": None, "r": 3, "interval": 1, "target": 2, "lr": 0.05,
               "epochs": 10, "start_round": 2, "malicious": None, "replacement": "approx", "clip_aware": False,
               "attackers": None, "injections": None,
               "trigger": {"size": 4, "gap": 2, "location": 0, "pixel_value": 1.0}},
    "defense": {"clip": None, "sigma": None, "noise_seed": None, "start_round": 0},
    "eval": {"offsets": [0, 40, 80, 120], "cadence_pre": 10, "cadence_post": 1, "feature_samples": 200,
             "feature_pairing": "all", "feature_class": None},
    "output": {"dir": "runs/default"},
}

# "synthetic" data kind keeps its own train size; the preset subset only applies to idx files
_SYNTH_IGNORES = ("train_subset",)


# ------------------------------------------------------------ YAML with lines


def _load_with_lines(text: str, source: str) -> tuple[dict, dict[str, int]]:
    """Parse YAML into plain data plus a map from dotted key to 1-based line."""
    loader = yaml.SafeLoader(text)
    try:
        node = loader.get_single_node()
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise ConfigParseError(f"{source}: malformed YAML: {exc.problem}", line=line) from None
    finally:
        loader.dispose()
    if node is None:
        return {}, {}
    lines: dict[str, int] = {}

    def walk(n, path):
        if isinstance(n, yaml.MappingNode):
            out = {}
            for k, v in n.value:
                key = loader.construct_object(k, deep=True)
                if not isinstance(key, str):
                    raise ConfigParseError(f"{source}: keys must be strings", key=str(key), line=k.start_mark.line + 1)
                dotted = f"{path}.{key}" if path else key
                lines[dotted] = k.start_mark.line + 1
                out[key] = walk(v, dotted)
            return out
        if isinstance(n, yaml.SequenceNode):
            return [walk(v, path) for v in n.value]
        return loader.construct_object(n, deep=True)

    data = walk(node, "")
    if not isinstance(data, dict):
        raise ConfigParseError(f"{source}: top level must be a mapping", line=node.start_mark.line + 1)
    return data, lines


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _validate(raw: dict, schema: dict, lines: dict[str, int], path: str = "") -> None:
    for key, value in raw.items():
        dotted = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigParseError("unknown key", key=dotted, line=lines.get(dotted))
        rule = schema[key]
        if isinstance(rule, dict):
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigParseError("expected a mapping", key=dotted, line=lines.get(dotted))
            _validate(value, rule, lines, dotted)
        else:
            try:
                raw[key] = rule(value, dotted)
            except TypeError as exc:
                raise ConfigParseError(str(exc), key=dotted, line=lines.get(dotted)) from None


# ------------------------------------------------------------- typed config


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "cnn"
    conv1: int = 16
    conv2: int = 32
    kernel: int = 5
    hidden: int = 128


@dataclass(frozen=True)
class DataSpec:
    kind: str = "synthetic"
    alpha: float = 0.5
    partition_seed: int | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_subset: int | None = None
    test_subset: int | None = None
    classes: int = 10
    dims: tuple[int, int, int] = (28, 28, 1)
    train_per_class: int = 1000
    test_per_class: int = 100
    synthetic: SynthParams = field(default_factory=SynthParams)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    preset: str
    federation: FederationConfig
    model: ModelSpec
    data: DataSpec
    attack: AttackConfig | None
    defense: DefenseConfig | None
    eval: EvalConfig
    output_dir: str
    raw: dict = field(repr=False, compare=False, default_factory=dict)

    def resolved(self) -> dict:
        """The fully-resolved document; parsing it reproduces this config."""
        doc = copy.deepcopy(self.raw)
        doc["schema_version"] = SCHEMA_VERSION
        return doc


def _section_error(section: str, lines: dict[str, int], exc: Exception) -> ConfigParseError:
    return ConfigParseError(str(exc), key=section, line=lines.get(section))


def build_config(doc: dict, lines: dict[str, int] | None = None, source: str = "<config>") -> ExperimentConfig:
    """Validate a parsed document, fill defaults and construct the typed config."""
    lines = lines or {}
    doc = copy.deepcopy(doc)
    _validate(doc, SCHEMA, lines)
    if "seed" not in doc:
        raise ConfigParseError(f"{source}: 'seed' (master seed) is mandatory", key="seed")
    preset = doc.get("preset", "mnist")
    attack_given = "attack" in doc and doc["attack"]
    defense_given = "defense" in doc and doc["defense"]

    merged = _merge(BASE, PRESETS[preset])
    if doc.get("data", {}) and doc["data"].get("kind", "synthetic") == "synthetic" or \
            ("data" not in doc or "kind" not in (doc.get("data") or {})):
        for k in _SYNTH_IGNORES:
            merged["data"][k] = None
    merged = _merge(merged, {k: v for k, v in doc.items() if v is not None})
    merged["seed"] = doc["seed"]
    merged["preset"] = preset
    merged.pop("schema_version", None)

    f = merged["federation"]
    try:
        fed = FederationConfig(n_total=f["clients"], n_round=f["per_round"], eta=f["eta"], total_rounds=f["rounds"],
                               master_seed=merged["seed"], lr=f["lr"], local_epochs=f["local_epochs"],
                               batch_size=f["batch_size"], warmup_rounds=f["warmup_rounds"], workers=f["workers"],
                               momentum=f["momentum"])
    except ConfigurationError as exc:
        raise _section_error("federation", lines, exc) from None

    model = ModelSpec(**merged["model"])

    d = merged["data"]
    if d["kind"] == "idx":
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            if not d.get(k):
                raise ConfigParseError("dataset path required for data.kind = idx", key=f"data.{k}",
                                       line=lines.get("data.kind", lines.get("data")))
    syn = dict(d["synthetic"])
    syn["contrast"] = tuple(syn["contrast"])
    try:
        if not d["alpha"] > 0:
            raise ConfigurationError(f"dirichlet alpha must be > 0, got {d['alpha']}")
        data = DataSpec(**{**d, "dims": tuple(d["dims"]), "synthetic": SynthParams(**syn)})
    except ConfigurationError as exc:
        raise _section_error("data", lines, exc) from None

    attack = None
    if attack_given:
        a = merged["attack"]
        if a["target"] is None:
            raise ConfigParseError(f"preset '{preset}' has no default target label; set it", key="attack.target",
                                   line=lines.get("attack"))
        trig = a["trigger"]
        loc = trig["location"]
        shift = (loc, loc) if isinstance(loc, int) else tuple(loc)
        gamma = a["gamma"] if a["gamma"] is not None else fed.replacement_gamma
        a["gamma"] = gamma
        try:
            attack = AttackConfig(
                strategy=a["strategy"], m=a["m"], gamma=gamma, r=a["r"], interval=a["interval"], target=a["target"],
                lr_poison=a["lr"], epochs_poison=a["epochs"], start_round=a["start_round"],
                malicious_client_ids=tuple(a["malicious"]) if a["malicious"] is not None else None,
                trigger_size=trig["size"], trigger_gap=trig["gap"], trigger_shift=shift,
                pixel_value=trig["pixel_value"], replacement=a["replacement"], clip_aware=a["clip_aware"],
                n_attackers=a["attackers"], n_injections=a["injections"],
            )
            if not 0 <= attack.target < data.classes:
                raise ConfigurationError(f"target label {attack.target} outside [0, {data.classes})")
        except ConfigurationError as exc:
            raise _section_error("attack", lines, exc) from None
    else:
        merged["attack"] = None

    defense = None
    if defense_given:
        x = merged["defense"]
        try:
            defense = DefenseConfig(clip=x["clip"], sigma=x["sigma"], noise_seed=x["noise_seed"],
                                    start_round=x["start_round"])
        except ConfigurationError as exc:
            raise _section_error("defense", lines, exc) from None
    else:
        merged["defense"] = None

    e = merged["eval"]
    try:
        ev = EvalConfig(offsets=tuple(e["offsets"]), cadence_pre=e["cadence_pre"], cadence_post=e["cadence_post"],
                        feature_samples=e["feature_samples"], feature_pairing=e["feature_pairing"],
                        feature_class=e["feature_class"])
    except ConfigurationError as exc:
        raise _section_error("eval", lines, exc) from None

    return ExperimentConfig(seed=merged["seed"], preset=preset, federation=fed, model=model, data=data, attack=attack,
                            defense=defense, eval=ev, output_dir=merged["output"]["dir"], raw=merged)


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    doc, lines = _load_with_lines(text, source)
    return build_config(doc, lines, source)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigParseError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def load_document(path) -> tuple[dict, dict[str, int]]:
    path = Path(path)
    return _load_with_lines(path.read_text(encoding="utf-8"), str(path))


def set_dotted(doc: dict, dotted: str, value) -> dict:
    """Copy of ``doc`` with ``a.b.c`` set to ``value`` (creating sections as needed)."""
    out = copy.deepcopy(doc)
    node = out
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value
    return out
