"""Declarative run configs: a small YAML schema with strict validation.

A config fully describes one experiment (environment family + agent +
baselines + every hyperparameter), so a metrics file plus its config is
enough to regenerate the results bit for bit. Unknown keys are rejected
with file:line positions rather than silently ignored; typos in a
hyperparameter name should fail loudly before any compute is spent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

KINDS = (
    "bandit",
    "dsa",
    "dsa_multi",
    "coexist",
    "power",
    "v2x_turn_taking",
    "v2x_marl",
    "supervised_power",
    "unsupervised_power",
    "lsap",
)

BASELINES = (
    "random",
    "oracle",
    "myopic",
    "wmmse",
    "fp",
    "full_power",
    "turn_taking",
    "hungarian",
)

# top-level key -> (type, default factory)
_SCHEMA = {
    "kind": (str, None),
    "seed": (int, lambda: 0),
    "replicas": (int, lambda: 1),
    "out": (str, lambda: ""),
    "env": (dict, dict),
    "train": (dict, dict),
    "eval": (dict, dict),
    "baselines": (list, list),
}


@dataclass
class RunConfig:
    """One experiment: what to run, with what knobs, where to put it."""

    kind: str
    seed: int = 0
    replicas: int = 1
    out: str = ""
    env: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    baselines: list = field(default_factory=list)
    # key path -> 1-based config file line, for later error reporting;
    # not part of the config's identity
    lines: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(
                f"unknown experiment kind {self.kind!r}, expected one of {KINDS}"
            )
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.replicas < 1:
            raise ValueError("replicas must be at least 1")
        for b in self.baselines:
            if b not in BASELINES:
                raise ValueError(
                    f"unknown baseline {b!r}, expected one of {BASELINES}"
                )
        if not self.out:
            self.out = f"runs/{self.kind}"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "replicas": self.replicas,
            "out": self.out,
            "env": dict(self.env),
            "train": dict(self.train),
            "eval": dict(self.eval),
            "baselines": list(self.baselines),
        }


def _key_lines(path) -> dict:
    """Map every mapping key (dotted path) to its 1-based source line."""
    with open(path) as f:
        root = yaml.compose(f)
    lines: dict = {}

    def walk(node, prefix):
        if not isinstance(node, yaml.MappingNode):
            return
        for key_node, value_node in node.value:
            dotted = f"{prefix}{key_node.value}"
            lines[dotted] = key_node.start_mark.line + 1
            walk(value_node, dotted + ".")

    walk(root, "")
    return lines


def load_config(path) -> RunConfig:
    """Parse and validate a YAML run config.

    Errors carry ``path:line:`` prefixes so a bad key is a one-jump fix.
    """
    with open(path) as f:
        raw = yaml.safe_load(f)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}:1: config must be a mapping, got {type(raw).__name__}")
    lines = _key_lines(path)

    def err(key, msg):
        where = lines.get(key, 1)
        return ValueError(f"{path}:{where}: {msg}")

    for key in raw:
        if key not in _SCHEMA:
            raise err(key, f"unknown key {key!r}, expected one of {tuple(_SCHEMA)}")
    if "kind" not in raw:
        raise ValueError(f"{path}:1: missing required key 'kind'")

    fields = {}
    for key, (typ, default) in _SCHEMA.items():
        if key in raw:
            value = raw[key]
            if typ is int and isinstance(value, bool):
                raise err(key, f"{key!r} must be an integer, got a boolean")
            if not isinstance(value, typ):
                raise err(
                    key,
                    f"{key!r} must be {typ.__name__}, got {type(value).__name__}",
                )
            fields[key] = value
        elif default is not None:
            fields[key] = default()
    try:
        return RunConfig(lines=lines, **fields)
    except ValueError as e:
        # attach position info when the offending key can be identified
        msg = str(e)
        for key, needle in (("kind", "kind"), ("seed", "seed"),
                            ("replicas", "replicas"), ("baselines", "baseline")):
            if key in raw and needle in msg:
                raise err(key, msg) from None
        raise


def save_config(cfg: RunConfig, path) -> None:
    """Serialize so that load(save(cfg)) == cfg (the lines map aside)."""
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True, default_flow_style=False)


def config_from_dict(d: dict) -> RunConfig:
    unknown = set(d) - set(_SCHEMA)
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)}")
    return RunConfig(**d)
