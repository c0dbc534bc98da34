"""Experiment configuration: nested dataclasses addressed by dotted keys (``hicl.eps = 0.05``)."""

from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class ModelConfig:
    d_vis: int = 64
    d_txt: int = 96
    d: int = 32
    n_heads: int = 4
    ffn_ratio: int = 4
    max_slots: int = 16
    n_coarse: int = 12
    text_hidden: int = 64
    shared_trunk: bool = True


@dataclass
class HiclConfig:
    eps: float = 0.05
    iterations: int = 3
    lambda_local: float = 0.5
    alpha_init: float = 2.0


@dataclass
class MdpConfig:
    gamma: float = 2.0
    smoothing: float = 0.1
    beta_init: float = 10.0
    focal_mode: str = "smoothed"
    self_attention: bool = True


@dataclass
class LossConfig:
    w_hicl: float = 1.0
    w_mdp: float = 0.5
    w_aux: float = 0.1


@dataclass
class AblationConfig:
    no_hipa: bool = False  # both levels replaced by a mean over all patches
    no_hipa_level2: bool = False
    flat_crossattn: bool = False
    no_hicl_global: bool = False
    no_hicl_local: bool = False
    no_aux: bool = False

    def resolved(self) -> "AblationConfig":
        """Apply couplings: without per-image representations there is nothing for local OT to align."""
        out = dataclasses.replace(self)
        if out.flat_crossattn or out.no_hipa:
            out.no_hicl_local = True
        return out


ABLATIONS = {
    "full": {},
    "no_hicl": {"no_hicl_global": True, "no_hicl_local": True},
    "no_hipa": {"no_hipa": True},
    "flat_crossattn": {"flat_crossattn": True},
    "no_hipa_level2": {"no_hipa_level2": True},
    "no_aux": {"no_aux": True},
}


@dataclass
class TrainConfig:
    # AdamW betas/eps/weight decay are not given by the method description; de-facto defaults
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    hicl: HiclConfig = field(default_factory=HiclConfig)
    mdp: MdpConfig = field(default_factory=MdpConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls()
        apply_overrides(cfg, flatten(d))
        return cfg

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESETS: dict[str, dict[str, Any]] = {
    "desk": {"epochs": 20, "lr": 1e-3, "batch_size": 16},
    "paper": {
        "model.d_vis": 1024,
        "model.d_txt": 2048,
        "model.d": 512,
        "model.n_heads": 8,
        "model.text_hidden": 1024,
    },
}


def flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def set_key(cfg: TrainConfig, key: str, value: Any) -> None:
    obj = cfg
    *path, last = key.split(".")
    for part in path:
        if not dataclasses.is_dataclass(obj) or not hasattr(obj, part):
            raise KeyError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if last not in fields or dataclasses.is_dataclass(getattr(obj, last)):
        raise KeyError(f"unknown config key {key!r}")
    current = getattr(obj, last)
    if isinstance(value, str) and not isinstance(current, str):
        value = parse_value(value)
    if isinstance(current, bool):
        value = bool(value)
    elif isinstance(current, int):
        value = int(value)
    elif isinstance(current, float):
        value = float(value)
    setattr(obj, last, value)


def apply_overrides(cfg: TrainConfig, overrides: dict[str, Any]) -> TrainConfig:
    for k, v in overrides.items():
        set_key(cfg, k, v)
    return cfg


def parse_value(text: str) -> Any:
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config_file(path) -> dict[str, Any]:
    """Plain-text ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def write_config_file(cfg: TrainConfig, path) -> None:
    lines = [f"{k} = {json.dumps(v)}" for k, v in flatten(cfg.to_dict()).items()]
    Path(path).write_text("\n".join(lines) + "\n")


def make_config(preset: str = "desk", config_file=None, overrides: dict[str, Any] | None = None) -> TrainConfig:
    cfg = TrainConfig()
    apply_overrides(cfg, PRESETS[preset])
    if config_file is not None:
        apply_overrides(cfg, read_config_file(config_file))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg
