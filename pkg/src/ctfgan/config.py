"""Run configuration schema.

Every section rejects unknown keys. A run config is a YAML (or JSON)
document with the top-level sections ``model``, ``train``, ``data``,
``eval`` and the key ``output_dir``.
"""

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "ToyDataConfig",
    "DataConfig",
    "EvalConfig",
    "RunConfig",
    "ConfigError",
    "load_config",
    "config_hash",
    "format_validation_error",
]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True, validate_default=True)


class ModelConfig(_Strict):
    lq_resolution: int = Field(8, ge=2)
    num_blocks: int = Field(2, ge=1)
    glh_channels: List[int] = [32, 32, 32]
    ga_channels: List[int] = [64, 32, 32]
    d_channels: int = Field(32, ge=1)
    d_extra_blocks: int = Field(1, ge=0)
    glh_noise_dim: int = Field(16, ge=1)
    ga_noise_dim: int = Field(64, ge=1)
    embed_dim: int = Field(16, ge=1)
    ga_norm: Literal["bn", "cbn"] = "bn"

    # field validators (not a model validator) so that width problems are
    # reported together with every other field error
    @field_validator("glh_channels", "ga_channels")
    @classmethod
    def _widths(cls, widths, info):
        if any(w < 1 for w in widths):
            raise ValueError("entries must be positive")
        num_blocks = info.data.get("num_blocks")
        if num_blocks is not None and len(widths) != num_blocks + 1:
            raise ValueError(f"needs num_blocks + 1 = {num_blocks + 1} entries")
        return widths

    @property
    def hq_resolution(self):
        return self.lq_resolution * 2 ** self.num_blocks


class TrainConfig(_Strict):
    lr_g: float = Field(2e-4, gt=0)
    lr_d: float = Field(2e-4, gt=0)
    beta1: float = Field(0.0, ge=0, lt=1)
    beta2: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(16, ge=2)
    d_steps_per_g_step: int = Field(5, ge=1)
    lambda_sp: float = Field(0.5, ge=0)
    sp_fraction: float = Field(0.5, ge=0, le=1)
    phase1_max_steps: int = Field(200, ge=0)
    phase2_max_steps: int = Field(200, ge=0)
    patience: int = Field(5, ge=1)
    switch_threshold: float = Field(0.01, ge=0, lt=1)
    eval_every: int = Field(50, ge=1)
    switch_eval_samples: int = Field(256, ge=2)
    checkpoint_every: int = Field(100, ge=0)
    seed: int = 0
    freeze_glh: bool = True
    ctf_ablation: bool = False

    @field_validator("batch_size")
    @classmethod
    def _even_batch(cls, value):
        if value % 2:
            raise ValueError("must be even (equal HQ/LQ split)")
        return value


class ToyDataConfig(_Strict):
    num_classes: int = Field(2, ge=1, le=4)
    hq_per_class: int = Field(256, ge=1)
    lq_per_class: int = Field(128, ge=1)
    eval_per_class: int = Field(128, ge=1)
    seed: int = 1234


class DataConfig(_Strict):
    root: Optional[str] = None
    hq_manifest: Optional[str] = None
    lq_manifest: Optional[str] = None
    eval_manifest: Optional[str] = None
    hq_classes: List[str] = []
    lq_classes: List[str] = []
    toy: Optional[ToyDataConfig] = None

    @model_validator(mode="after")
    def _source(self):
        if self.toy is None:
            missing = [k for k in ("root", "hq_manifest", "lq_manifest") if getattr(self, k) is None]
            if missing:
                raise ValueError(f"either toy or {', '.join(missing)} must be given")
            if not self.hq_classes or not self.lq_classes:
                raise ValueError("hq_classes and lq_classes are required with manifests")
        return self


class EvalConfig(_Strict):
    num_samples: int = Field(5000, ge=2)
    is_splits: int = Field(10, ge=1)
    seed: int = 0
    classifier_seed: int = 0
    classifier_epochs: int = Field(15, ge=1)


class RunConfig(_Strict):
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig(toy=ToyDataConfig())
    eval: EvalConfig = EvalConfig()
    output_dir: str = "runs/default"


class ConfigError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def format_validation_error(exc):
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append(f"{loc}: {err['msg']}")
    return out


def parse_config(document):
    try:
        return RunConfig.model_validate(document or {})
    except ValidationError as exc:
        raise ConfigError(format_validation_error(exc)) from None


def load_config(path):
    text = Path(path).read_text(encoding="utf-8")
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"<document>: {exc}"]) from None
    if document is not None and not isinstance(document, dict):
        raise ConfigError(["<root>: config must be a mapping"])
    return parse_config(document)


def config_hash(cfg):
    """Hash of everything that influences training (output_dir excluded)."""
    payload = cfg.model_dump(exclude={"output_dir"})
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
