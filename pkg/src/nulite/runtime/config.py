"""Run configuration: TOML file with ``[encoder] [network] [loss] [train] [data] [postprocess] [eval]`` sections."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import tomli

from ..data import AugmentConfig
from ..losses import LossWeights
from ..network import NetworkConfig, variant
from ..postprocess import PostprocessParams


@dataclass(frozen=True)
class TrainConfig:
    beta1: float = 0.85
    beta2: float = 0.95
    lr: float = 3e-4
    weight_decay: float = 1e-4
    gamma: float = 0.85
    batch_size: int = 16
    epochs: int = 130
    seed: int = 0
    grad_clip: float = 5.0  # 0 disables clipping
    sampler_gamma: float = 1.0
    sampler_beta: float = 0.1
    augment: bool = True
    log_every: int = 1

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ValueError("scheduler gamma must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.grad_clip < 0 or self.weight_decay < 0:
            raise ValueError("grad_clip and weight_decay must be >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.gamma ** epoch


@dataclass(frozen=True)
class DataConfig:
    root: str = ""
    train_folds: Tuple[int, ...] = (0,)
    val_folds: Tuple[int, ...] = ()
    mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: Tuple[float, float, float] = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class EvalConfig:
    radius_px: float = 12.0
    tile_size: int = 256
    overlap_px: int = 64


@dataclass(frozen=True)
class Config:
    variant: str = "NuLite-T"
    alternative_backbone: bool = False
    num_nuclei_classes: int = 6
    num_tissue_classes: int = 19
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    postprocess: PostprocessParams = field(default_factory=PostprocessParams)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def network_config(self) -> NetworkConfig:
        return variant(self.variant, self.num_nuclei_classes, self.num_tissue_classes, self.alternative_backbone)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "encoder": {"variant": self.variant, "alternative_backbone": self.alternative_backbone},
            "network": {"num_nuclei_classes": self.num_nuclei_classes, "num_tissue_classes": self.num_tissue_classes},
            "loss": asdict(self.loss),
            "train": asdict(self.train),
            "data": {**asdict(self.data), "augment": asdict(self.augment)},
            "postprocess": asdict(self.postprocess),
            "eval": asdict(self.eval),
        }


def _coerce(cls, values: Dict[str, Any], section: str):
    known = {f.name: f for f in fields(cls)}
    out = {}
    for k, v in values.items():
        if k not in known:
            raise ValueError(f"unknown key [{section}].{k}")
        default = getattr(cls(), k)
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        elif isinstance(default, bool):
            v = _as_bool(v)
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(v, float) and not v.is_integer():
                raise ValueError(f"[{section}].{k} must be an integer")
            v = int(v)
        elif isinstance(default, float):
            v = float(v)
        out[k] = v
    return out


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("true", "1", "yes"):
        return True
    if isinstance(v, str) and v.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def from_dict(doc: Dict[str, Any]) -> Config:
    allowed = {"encoder", "network", "loss", "train", "data", "postprocess", "eval"}
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")
    kw: Dict[str, Any] = {}
    enc = dict(doc.get("encoder", {}))
    for k in list(enc):
        if k not in ("variant", "alternative_backbone"):
            raise ValueError(f"unknown key [encoder].{k}")
    if "variant" in enc:
        kw["variant"] = str(enc["variant"])
    if "alternative_backbone" in enc:
        kw["alternative_backbone"] = _as_bool(enc["alternative_backbone"])
    net = dict(doc.get("network", {}))
    for k, v in net.items():
        if k not in ("num_nuclei_classes", "num_tissue_classes"):
            raise ValueError(f"unknown key [network].{k}")
        kw[k] = int(v)
    kw["loss"] = LossWeights(**_coerce(LossWeights, doc.get("loss", {}), "loss"))
    kw["train"] = TrainConfig(**_coerce(TrainConfig, doc.get("train", {}), "train"))
    data = dict(doc.get("data", {}))
    aug = data.pop("augment", {})
    kw["data"] = DataConfig(**_coerce(DataConfig, data, "data"))
    kw["augment"] = AugmentConfig(**_coerce(AugmentConfig, aug, "data.augment"))
    kw["postprocess"] = PostprocessParams(**_coerce(PostprocessParams, doc.get("postprocess", {}), "postprocess"))
    kw["eval"] = EvalConfig(**_coerce(EvalConfig, doc.get("eval", {}), "eval"))
    cfg = Config(**kw)
    cfg.train.validate()
    cfg.network_config().validate()
    return cfg


def _parse_value(text: str):
    # reuse the TOML scalar grammar for override values; bare words stay strings
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(doc: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """``section.key=value`` (or ``data.augment.key=value``) overrides on a raw config document."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form section.key=value")
        path, value = item.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) < 2:
            raise ValueError(f"override {item!r} needs a section prefix")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {item!r} addresses a scalar")
        node[parts[-1]] = _parse_value(value.strip())
    return doc


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> Config:
    doc: Dict[str, Any] = {}
    if path:
        with open(Path(path), "rb") as fh:
            doc = tomli.load(fh)
    return from_dict(apply_overrides(doc, overrides))


def with_seed(cfg: Config, seed: Optional[int]) -> Config:
    if seed is None:
        return cfg
    return replace(cfg, train=replace(cfg.train, seed=int(seed)))
