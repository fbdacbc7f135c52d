"""Run configuration: one YAML file, schema-checked, with documented defaults."""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .encoders import BackendSpec
from .engine import TrainConfig
from .errors import ConfigurationError
from .latentspace import DEFAULT_WIDTHS


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ToySection(_Section):
    seed: int = Field(7, description="seed of the procedural suite")
    n_domains: int = Field(3, ge=2, description="number of styled domains")
    n_classes: int = Field(6, ge=3, description="number of pattern classes")
    n_per_cell: int = Field(20, ge=1, description="images per (domain, class)")
    image_size: int = Field(32, ge=32, description="square image side in pixels")


class DatasetSection(_Section):
    root: str | None = Field(None, description="folder suite root; None uses the toy suite")
    image_size: int = Field(224, ge=8, description="resize side for folder suites")
    toy: ToySection = Field(default_factory=ToySection, description="procedural suite used when root is None")
    class_split: str | dict[str, list[int | str]] | None = Field(
        None, description="class-split file path or inline mapping; None means closed-set")


class BackendSection(_Section):
    kind: Literal["mock", "clip"] = Field("mock", description="encoder backend")
    seed: int = Field(0, description="mock weight seed")
    d_v: int = Field(16, ge=2, description="mock visual embedding width")
    d_tok: int = Field(16, ge=2, description="mock token width")
    d_t: int = Field(16, ge=2, description="mock text embedding width")
    n_patch_tokens: int = Field(16, ge=1, description="mock patch-token count (a square)")
    weights: str | None = Field(None, description="local CLIP weights for kind=clip")

    def spec(self) -> BackendSpec:
        return BackendSpec(**self.model_dump())


class OpenGenSection(_Section):
    backend: Literal["stub", "diffusion"] = Field("stub", description="image generator")
    endpoint: str | None = Field(None, description="base URL of the diffusion service")
    model_id: str = Field("runwayml/stable-diffusion-v1-5", description="generator model id")
    guidance_scale: float = Field(7.5, gt=0, description="classifier-free guidance")
    seed: int = Field(0, description="stub generator seed")
    image_size: int = Field(32, ge=8, description="side of generated images")
    threshold: float = Field(0.2, ge=0, le=1, description="normalized entropy cut")
    count: int | None = Field(None, ge=1, description="images per source domain; None: open slots x steps/epoch")
    cache_dir: str | None = Field(None, description="pool cache; env ODGCLIP_CACHE when unset")
    workers: int = Field(1, ge=1, description="parallel generation requests")


class TrainSection(_Section):
    epochs: int = Field(10, description="passes over the real pool")
    base_lr: float = Field(0.01, description="peak Adam learning rate")
    warmup_fraction: float = Field(0.1, description="share of steps with linear warm-up")
    batch_size: int = Field(32, description="images per step, real plus pseudo-open")
    open_fraction: float = Field(0.25, description="pseudo-open share of each batch")
    tau: float = Field(0.01, description="softmax temperature")
    seed: int = Field(0, description="seed of the first run")
    steps_per_epoch: int | None = Field(None, description="None: real pool / real slots per batch")
    max_steps: int | None = Field(None, description="hard cap on optimizer steps")
    use_sem: bool = Field(True, description="add the cross-domain consistency loss")
    use_xhat: bool = Field(True, description="classify latent images instead of raw ones")
    manual_xhat: bool = Field(False, description="replace differentials by fixed class-name embeddings")
    pp_only: bool = Field(False, description="generate the open pool without negative prompts")
    init_mode: Literal["phrase", "gaussian"] = Field("phrase", description="context initialization")
    dom_token_position: Literal["front", "middle", "end"] = Field("front", description="domain token slot")
    n_ctx_cls: int = Field(4, description="context tokens in class prompts")
    n_ctx_dom: int = Field(4, description="context tokens in domain prompts")
    upsampler_widths: list[int] = Field(default_factory=lambda: list(DEFAULT_WIDTHS),
                                        description="channel widths of the four transposed convolutions")

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(**self.model_dump())


class EvalSection(_Section):
    seeds: int = Field(3, ge=1, description="runs per split, seeds s..s+seeds-1")
    output_dir: str = Field("runs", description="where reports and checkpoints go")
    targets: list[str] | None = Field(None, description="restrict LODO to these held-out domains")
    closed_set: bool = Field(False, description="closed-set DG: no open classes, Acc only")
    plots: bool = Field(True, description="write PNG plots")


class RunConfig(_Section):
    dataset: DatasetSection = Field(default_factory=DatasetSection, description="images and class split")
    backend: BackendSection = Field(default_factory=BackendSection, description="frozen dual encoder")
    opengen: OpenGenSection = Field(default_factory=OpenGenSection, description="pseudo-open pool")
    train: TrainSection = Field(default_factory=TrainSection, description="optimization and ablation switches")
    eval: EvalSection = Field(default_factory=EvalSection, description="seeds and outputs")

    @model_validator(mode="after")
    def _check(self):
        if self.backend.kind == "mock" and self.backend.d_v != self.backend.d_t:
            raise ValueError("backend.d_v must equal backend.d_t")
        if self.opengen.backend == "diffusion" and not self.opengen.endpoint:
            raise ValueError("opengen.endpoint is required for the diffusion backend")
        return self

    def dump(self) -> str:
        return yaml.safe_dump(self.model_dump(), sort_keys=True)


def parse_config(data: dict | None) -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigurationError(str(exc)) from exc


def load_config(path: str | Path | None) -> RunConfig:
    """Read a YAML run config; ``None`` gives all defaults."""
    if path is None:
        return parse_config({})
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file {p} not found")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {p} is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError("config file must hold a mapping")
    return parse_config(data)


def with_overrides(cfg: RunConfig, overrides: dict[str, dict]) -> RunConfig:
    """New config with ``{section: {key: value}}`` applied; validation reruns."""
    data = cfg.model_dump()
    for section, vals in overrides.items():
        for k, v in vals.items():
            if v is not None:
                data[section][k] = v
    return parse_config(data)
