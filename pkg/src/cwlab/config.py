"""Configuration tree resolution.

A resolved configuration is built from built-in defaults, then an optional
JSON file, then command-line overrides (later sources win). The hash is
computed over the canonical JSON of the tree so it does not depend on key
order.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig
from .bench import BenchSpec
from .causal import CausalLossWeights
from .envs import EnvConfig
from .errors import ConfigError
from .training import StageConfig, config_hash

SECTIONS = ("env", "backbone", "causal", "stages", "bench", "eval")


@dataclass
class EvalConfig:
    intervention_mode: str = "observation"  # observation | latent
    seeds: tuple[int, ...] = (42, 43, 44)
    rel_threshold: float = 0.3
    abs_threshold: float = 0.0
    top_k: int | None = None

    def validate(self) -> "EvalConfig":
        if self.intervention_mode not in ("observation", "latent"):
            raise ConfigError(f"unknown intervention mode {self.intervention_mode!r}")
        if not 0.0 <= self.rel_threshold <= 1.0:
            raise ConfigError("rel_threshold must lie in [0, 1]")
        return self


def default_tree() -> dict:
    """Full-scale defaults, one nested dict per section."""
    stages = asdict(StageConfig())
    stages.pop("weights")
    return {
        "env": asdict(EnvConfig()),
        "backbone": asdict(BackboneConfig()),
        "causal": asdict(CausalLossWeights()),
        "stages": stages,
        "bench": asdict(BenchSpec()),
        "eval": asdict(EvalConfig()),
    }


def desk_preset() -> dict:
    """Overrides for single-CPU runs: stage epochs divided by 4, smaller batches and latents."""
    s = StageConfig()
    return {
        "env": {"obs_mode": "pixels", "frame_skip": 10},
        "backbone": {"hidden_dim": 128, "num_slots": 3, "slot_dim": 4},
        "stages": {
            "s1_epochs": s.s1_epochs // 4,
            "s2_epochs": s.s2_epochs // 4,
            "s3_epochs": s.s3_epochs // 4,
            "batch_size": 128,
            "s3_batch_size": 128,
            "s2_lr": 5e-3,
        },
    }


def merge(base: dict, override: dict, path: str = "") -> dict:
    """Recursive merge; unknown keys are rejected so typos do not pass silently."""
    out = dict(base)
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def set_dotted(tree: dict, key: str, value) -> dict:
    parts = key.split(".")
    if len(parts) < 2 or parts[0] not in tree:
        raise ConfigError(f"override key must look like section.field, got {key!r}")
    override: dict = {}
    node = override
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return merge(tree, override)


def parse_value(text: str):
    """Interpret a ``--set`` value as JSON when possible, else as a string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def output_root() -> Path:
    return Path(os.environ.get("CWLAB_OUT", "cwlab_out"))


@dataclass
class ResolvedConfig:
    tree: dict
    out_dir: str = ""
    sources: list[str] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return int(self.tree["stages"]["seed"])

    @property
    def hash(self) -> str:
        return config_hash(self.tree)

    def env(self) -> EnvConfig:
        return EnvConfig(**self.tree["env"])

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(**self.tree["backbone"]).validate()

    def weights(self) -> CausalLossWeights:
        w = dict(self.tree["causal"])
        w["lambdas"] = tuple(w["lambdas"])
        return CausalLossWeights(**w).validate()

    def stages(self) -> StageConfig:
        return StageConfig(**self.tree["stages"], weights=self.weights()).validate()

    def bench(self) -> BenchSpec:
        return BenchSpec(**self.tree["bench"]).validate()

    def evaluation(self) -> EvalConfig:
        e = dict(self.tree["eval"])
        e["seeds"] = tuple(e["seeds"])
        return EvalConfig(**e).validate()

    def validate(self) -> "ResolvedConfig":
        self.backbone(), self.stages(), self.bench(), self.evaluation()
        return self

    def to_dict(self) -> dict:
        return {**self.tree, "config_hash": self.hash, "seed": self.seed, "out_dir": self.out_dir, "sources": self.sources}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str)


def resolve(config_file: str | Path | None = None, overrides: dict | None = None, desk: bool = False,
            out_dir: str | Path | None = None) -> ResolvedConfig:
    tree, sources = default_tree(), ["defaults"]
    if desk:
        tree, sources = merge(tree, desk_preset()), sources + ["desk"]
    if config_file is not None:
        try:
            data = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config file {config_file}: {e}") from e
        data = {k: v for k, v in data.items() if k in SECTIONS}
        tree, sources = merge(tree, data), sources + [str(config_file)]
    for k, v in (overrides or {}).items():
        tree = set_dotted(tree, k, v)
    if overrides:
        sources.append("flags")
    return ResolvedConfig(tree, str(out_dir) if out_dir is not None else "", sources).validate()


def dataclass_keys(cls) -> list[str]:
    return [f.name for f in fields(cls)]
