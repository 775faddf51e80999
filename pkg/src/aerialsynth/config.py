"""Pipeline configuration (JSON, versioned, unknown keys rejected)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError, FileNotFound

SCHEMA_VERSION = "aerialsynth.config/v1"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Paths(_Strict):
    dataset: str
    detections: Optional[str] = None
    output_dir: str = "out"


class PrototypeConfig(_Strict):
    tau_det: float = Field(0.5, gt=0, le=1)
    alpha: float = Field(0.5, gt=0, lt=1)
    tau_lat_quantile: float = Field(0.5, gt=0, le=1)
    embedding_source: str = "builtin"  # "builtin" or a path to an embeddings JSON


class FocalConfig(_Strict):
    k_default: int = Field(3, ge=1)
    window_size: int = Field(256, ge=1)
    seed: Optional[int] = Field(None, ge=0)
    keep_clipped_min_visibility: Optional[float] = Field(None, gt=0, le=1)


class ConditionConfig(_Strict):
    fourier_bands: int = Field(8, ge=1, le=32)
    weight_w: float = Field(2.0, ge=1, le=65.535)


class ImageBackground(_Strict):
    image: str


class GeneratorConfig(_Strict):
    mode: Literal["builtin", "external"] = "builtin"
    command: Optional[str] = None
    parallelism: int = Field(1, ge=1)
    timeout_s: int = Field(120, ge=1)
    background: Union[Literal["zero", "source"], Tuple[int, int, int], ImageBackground] = "source"
    noise_std: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _command_needed(self):
        if self.mode == "external" and not self.command:
            raise ValueError("generator.command is required in external mode")
        if isinstance(self.background, tuple) and not all(0 <= v <= 255 for v in self.background):
            raise ValueError("solid background must be an RGB triple in 0..255")
        return self


class SimulateConfig(_Strict):
    miss_rate: float = Field(0.1, ge=0, le=1)
    false_rate: float = Field(0.1, ge=0, le=1)
    jitter_std_px: float = Field(1.0, ge=0)
    score_mu: float = Field(0.8, ge=0, le=1)
    score_sigma: float = Field(0.1, ge=0)


class RefineSection(_Strict):
    tau_ref: float = Field(0.5, gt=0, le=1)
    alpha: float = Field(0.1, gt=0, lt=1)
    beta: float = Field(0.9, gt=0, lt=1)
    gamma: float = Field(0.9, gt=0, lt=1)
    detections_path: Optional[str] = None
    model_detections_path: Optional[str] = None
    simulate: SimulateConfig = SimulateConfig()


class MergeConfig(_Strict):
    mode: Literal["mosaic", "paste_back"] = "mosaic"
    canvas: Tuple[int, int] = (1280, 1280)

    @model_validator(mode="after")
    def _positive(self):
        if min(self.canvas) < 1:
            raise ValueError("merge.canvas must be positive")
        return self


class PipelineConfig(_Strict):
    schema_: Literal["aerialsynth.config/v1"] = Field(SCHEMA_VERSION, alias="schema")
    global_seed: int = Field(0, ge=0)
    paths: Paths
    prototype: PrototypeConfig = PrototypeConfig()
    focal: FocalConfig = FocalConfig()
    condition: ConditionConfig = ConditionConfig()
    generator: GeneratorConfig = GeneratorConfig()
    refine: RefineSection = RefineSection()
    merge: MergeConfig = MergeConfig()

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    # set by load_config; relative paths resolve against it
    base_dir: Path = Field(Path("."), exclude=True)

    def resolve(self, p: Optional[str]) -> Optional[Path]:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.paths.output_dir)

    @property
    def focal_seed(self) -> int:
        return self.global_seed if self.focal.seed is None else self.focal.seed


def parse_config(doc: dict, base_dir: Path = Path("."), seed: Optional[int] = None) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if "base_dir" in doc:
        raise ConfigError("unknown config key 'base_dir'")
    if "schema" not in doc:
        raise ConfigError(f"config is missing the 'schema' field (expected {SCHEMA_VERSION!r})")
    try:
        cfg = PipelineConfig.model_validate({**doc, "base_dir": base_dir})
    except ValidationError as exc:
        msgs = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())
        raise ConfigError(f"invalid config: {msgs}") from None
    if seed is not None:
        cfg = cfg.model_copy(update={"global_seed": seed})
    return cfg


def load_config(path: Path, seed: Optional[int] = None) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFound(f"file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc, path.parent.resolve(), seed)
