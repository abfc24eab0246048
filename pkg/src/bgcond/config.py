"""Experiment configuration: one JSON document validated against a published schema."""
from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import jsonschema

from .backdoor import AttackBudget
from .condense import CondensationConfig
from .errors import BundleIncomplete, ConfigError
from .models import ModelSpec

ENV_OUT = "BGCOND_OUT"
ENV_THREADS = "BGCOND_THREADS"

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_NULLABLE_INT = {"type": ["integer", "null"]}


def _props(cls, overrides):
    out = {}
    for f in fields(cls):
        out[f.name] = overrides.get(f.name, _type_schema(f.type))
    return out


def _type_schema(t):
    t = str(t)
    if "bool" in t:
        return {"type": "boolean"}
    if "int | None" in t:
        return _NULLABLE_INT
    if t == "int":
        return _INT
    if t == "float":
        return _NUM
    if t == "str":
        return {"type": "string"}
    return {}


CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "bgcond experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "seeds"],
    "properties": {
        "name": {"type": "string"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "sbm": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["num_nodes", "classes", "d"],
                    "properties": {"num_nodes": _INT, "classes": _INT, "d": _INT, "p_in": _NUM, "p_out": _NUM,
                                   "seed": _INT},
                },
            },
            "oneOf": [{"required": ["path"]}, {"required": ["sbm"]}],
        },
        "condensation": {
            "type": "object",
            "additionalProperties": False,
            "properties": _props(CondensationConfig, {
                "method": {"enum": ["GCond", "GCond-X", "DC-Graph"]},
                "ratio_base": {"enum": ["nodes", "train"]},
                "optimizer": {"enum": ["adam", "sgd"]},
                "seed": _INT,
            }),
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "properties": _props(AttackBudget, {
                "selection": {"enum": ["score", "random"]},
                "generator": {"enum": ["GCN", "MLP"]},
                "score_sign": {"enum": [1, -1]},
                "source_class": _NULLABLE_INT,
                "feature_mass_scale": {"type": ["number", "null"], "exclusiveMinimum": 0},
            }),
        },
        "models": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["kind"],
                "properties": {"kind": {"enum": ["GCN", "SGC", "MLP"]}, "layers": _INT, "hidden": _INT,
                               "k": _INT, "dropout": _NUM, "bias": {"type": "boolean"}},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"epochs": _INT, "lr": _NUM, "weight_decay": _NUM},
        },
        "defenses": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name"],
                "properties": {"name": {"enum": ["prune", "randsmooth"]}, "fraction": _NUM, "d": _INT,
                               "keep_prob": _NUM},
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"exclude_already_target": {"type": "boolean"}},
        },
        "seeds": {"type": "array", "minItems": 1, "items": _INT},
        "output": {"type": "string"},
    },
}


def _line_of(text: str, path) -> int | None:
    """Best-effort line number of the JSON element at ``path`` (keys and list indices)."""
    pos = 0
    for part in path:
        if isinstance(part, int):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(str(part))).search(text, pos)
        if m is None:
            break
        pos = m.start()
    return text.count("\n", 0, pos) + 1 if path else 1


@dataclass
class ExperimentConfig:
    dataset: dict
    seeds: list
    condensation: CondensationConfig = field(default_factory=CondensationConfig)
    attack: AttackBudget = field(default_factory=AttackBudget)
    models: list = field(default_factory=lambda: [ModelSpec("GCN")])
    training: dict = field(default_factory=dict)
    defenses: list = field(default_factory=list)
    evaluation: dict = field(default_factory=dict)
    output: str | None = None
    name: str = "experiment"
    source: Path | None = None
    raw: dict = field(default_factory=dict)

    def dataset_path(self) -> Path | None:
        p = self.dataset.get("path")
        if p is None:
            return None
        p = Path(os.path.expandvars(os.path.expanduser(p)))
        if not p.is_absolute() and self.source is not None:
            p = self.source.parent / p
        return p

    def load_graph(self):
        from .graph import generate_sbm_graph, load_graph_bundle

        if "sbm" in self.dataset:
            s = dict(self.dataset["sbm"])
            return generate_sbm_graph(s["num_nodes"], s["classes"], s["d"], s.get("p_in", 0.05),
                                      s.get("p_out", 0.005), s.get("seed", 0))
        path = self.dataset_path()
        if not path.is_dir():
            raise BundleIncomplete(f"dataset bundle {path} does not exist")
        return load_graph_bundle(path)

    def stage_config(self, stage: str, seed: int) -> dict:
        """Canonical sub-config that determines an artifact of ``stage`` (``clean`` or ``attack``)."""
        cond = self.condensation.to_dict()
        cond["seed"] = int(seed)
        out = {"stage": stage, "dataset": self.dataset, "condensation": cond}
        if stage == "attack":
            out["attack"] = self.attack.to_dict()
        return out

    def fingerprint(self, stage: str, seed: int) -> str:
        return fingerprint(self.stage_config(stage, seed))

    def output_dir(self, override=None) -> Path:
        if override is not None:
            return Path(override)
        if self.output is not None:
            p = Path(self.output)
            if not p.is_absolute() and self.source is not None and ENV_OUT not in os.environ:
                p = self.source.parent / p
            elif not p.is_absolute() and ENV_OUT in os.environ:
                p = Path(os.environ[ENV_OUT]) / p
            return p
        return Path(os.environ.get(ENV_OUT, ".")) / self.name


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def parse_config(text: str, source=None) -> ExperimentConfig:
    where = str(source) if source is not None else "<config>"
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{where}:{e.lineno}:{e.colno}: {e.msg}") from None
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        e = errors[0]
        path = list(e.absolute_path)
        line = _line_of(text, path)
        dotted = ".".join(str(p) for p in path) or "<root>"
        raise ConfigError(f"{where}:{line}: {dotted}: {e.message}")
    try:
        cond = CondensationConfig(**raw.get("condensation", {}))
        attack = AttackBudget(**raw.get("attack", {}))
        models = [ModelSpec(**m) for m in raw.get("models", [{"kind": "GCN"}])]
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None
    cfg = ExperimentConfig(
        dataset=raw["dataset"],
        seeds=[int(s) for s in raw["seeds"]],
        condensation=cond,
        attack=attack,
        models=models,
        training=raw.get("training", {}),
        defenses=raw.get("defenses", []),
        evaluation=raw.get("evaluation", {}),
        output=raw.get("output"),
        name=raw.get("name", "experiment"),
        source=Path(source) if source is not None else None,
        raw=raw,
    )
    path = cfg.dataset_path()
    if path is not None and not path.is_dir():
        raise BundleIncomplete(f"{where}:{_line_of(text, ['dataset', 'path'])}: dataset bundle {path} does not exist")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such config file")
    return parse_config(path.read_text(), source=path)
