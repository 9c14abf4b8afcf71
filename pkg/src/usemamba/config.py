"""Run configuration: schema-validated, unknown keys rejected."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .combiner import CombinerConfig
from .distortions import KINDS
from .flowmatch import FlowConfig
from .losses import LossWeights, MultiResConfig
from .model import ModelConfig
from .signals import StftConfig
from .ssm import MambaBlockConfig, StackConfig

OUTPUT_ROOT_ENV = "USEMAMBA_OUTPUT_ROOT"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class StftSection(_Section):
    frame_ms: float = 32.0
    hop_ms: float = 8.0
    compression_exponent: float = 0.3


class ModelSection(_Section):
    variant: Literal["regression", "flow"] = "regression"
    n1_blocks: int = Field(4, ge=1)
    n2_blocks: int = Field(2, ge=0)
    model_dim: int = Field(64, ge=1)
    state_dim: int = Field(16, ge=1)
    expand: int = Field(2, ge=1)
    conv_width: int = Field(4, ge=1)
    bidirectional: bool = True
    emb_dim: Optional[int] = None
    stft: StftSection = StftSection()

    @model_validator(mode="after")
    def _variant_embedding(self):
        if self.variant == "flow" and self.emb_dim is None:
            self.emb_dim = 1024
        if self.variant == "regression" and self.emb_dim is not None:
            raise ValueError("emb_dim is only valid for the flow variant")
        if self.emb_dim is not None and self.emb_dim % 2:
            raise ValueError("emb_dim must be even")
        return self

    def build(self) -> ModelConfig:
        return ModelConfig(
            stft=StftConfig(self.stft.frame_ms, self.stft.hop_ms, "hann", self.stft.compression_exponent),
            stack=StackConfig(self.n1_blocks, self.n2_blocks, self.model_dim),
            mamba=MambaBlockConfig(self.model_dim, self.state_dim, self.expand, self.conv_width, self.bidirectional),
            variant=self.variant,
            emb_dim=self.emb_dim,
        )


class LossSection(_Section):
    lambda1: float = Field(0.5, ge=0)
    lambda2: float = Field(0.5, ge=0)
    lambda3: float = Field(0.3, ge=0)
    window_sizes: list[int] = [256, 512, 768, 1024]

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    def multires(self) -> MultiResConfig:
        return MultiResConfig(tuple(self.window_sizes))


class FlowSection(_Section):
    sigma_min: float = 1e-4
    n_steps: int = Field(20, ge=1)
    seed: int = 0

    def build(self) -> FlowConfig:
        return FlowConfig(self.sigma_min, self.n_steps, self.seed)


class CombinerSection(_Section):
    frame_energy_floor_db: float = -60.0
    rolloff_fraction: float = 0.99
    min_band_margin_db: float = 25.0

    def build(self) -> CombinerConfig:
        return CombinerConfig(self.frame_energy_floor_db, self.rolloff_fraction, self.min_band_margin_db)


class TrainingSection(_Section):
    lr: float = Field(5e-4, gt=0)
    min_lr_fraction: float = Field(0.1, ge=0, le=1)
    batch: int = Field(1, ge=1)
    steps: int = Field(1000, ge=1)
    seed: int = 0
    segment_s: float = Field(4.0, gt=0)
    checkpoint_every: int = Field(100, ge=1)
    log_every: int = Field(10, ge=1)
    grad_clip: float = Field(5.0, gt=0)


class SimulationSection(_Section):
    kinds: list[str] = ["additive_noise", "packet_loss"]
    seed: int = 0
    snr_db: tuple[float, float] = (0.0, 20.0)
    clip_threshold: tuple[float, float] = (0.1, 0.5)
    cutoff_hz: list[float] = [2000.0, 4000.0]
    n_loss_segments: int = Field(2, ge=1)
    loss_segment_s: float = Field(0.1, gt=0)
    output_format: Literal["float32", "pcm16"] = "float32"

    @model_validator(mode="after")
    def _known_kinds(self):
        bad = [k for k in self.kinds if k not in KINDS]
        if bad:
            raise ValueError(f"unknown distortion kinds {bad}; expected some of {list(KINDS)}")
        return self


class PathsSection(_Section):
    manifest: str = "data/manifest.jsonl"
    checkpoints: str = "checkpoints"
    output_dir: str = "outputs"


class RunConfig(_Section):
    model: ModelSection = ModelSection()
    loss: LossSection = LossSection()
    flow: FlowSection = FlowSection()
    combiner: CombinerSection = CombinerSection()
    training: TrainingSection = TrainingSection()
    simulation: SimulationSection = SimulationSection()
    paths: PathsSection = PathsSection()

    def resolve(self, path: str) -> Path:
        """Relative paths resolve against $USEMAMBA_OUTPUT_ROOT when set."""
        p = Path(path)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            return Path(root) / p
        return p

    def echo(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)


def _coerce(value: str):
    return yaml.safe_load(value)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars."""
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key.path=value")
        key, value = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = _coerce(value)
    return data


def load_config(path=None, overrides=()) -> RunConfig:
    data = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is not None and not isinstance(loaded, dict):
            raise ValueError(f"{path}: top level must be a mapping")
        data = loaded or {}
    return RunConfig.model_validate(apply_overrides(data, overrides))
