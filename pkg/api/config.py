"""
Run configuration.

Every field has a default; a JSON file given with --config and individual
command-line overrides are layered on top, and the resolved configuration is
echoed next to every command's outputs.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .errors import InvalidParameterError
from .models.vision_backbone import backbone_config

logger = logging.getLogger(__name__)

RESOLUTIONS = (224, 448, 512)
CONFIG_ECHO = "config_echo.json"


class DataConfig(BaseModel):
    data_dir: str = "data/synthetic"
    manifest: Optional[str] = None  # defaults to <data_dir>/manifest.tsv
    image_size: int = 224
    num_samples: int = 64
    prevalence: float = 0.5
    split_ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = Field(default=0, ge=0)

    @field_validator("split_ratios")
    @classmethod
    def _ratios_sum_to_one(cls, v):
        if abs(sum(v) - 1.0) > 1e-9 or any(r < 0 for r in v):
            raise ValueError(f"split ratios must be non-negative and sum to 1, got {v}")
        return v

    @property
    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else Path(self.data_dir) / "manifest.tsv"


class ModelConfig(BaseModel):
    backbone: Literal["miniature", "tiny", "small", "base"] = "miniature"
    block_kind: Literal["vmamba", "attention"] = "vmamba"
    decoder_kind: Literal["ssm", "attention"] = "ssm"
    embed_dim: int = 64
    decoder_layers: int = 2
    decoder_d_state: int = 8
    context_window: Optional[int] = Field(default=None, ge=2)  # None sizes it to the longest prompt + report
    scan_mode: Literal["sequential", "parallel"] = "parallel"
    freeze_backbone: bool = False


class ContextConfig(BaseModel):
    n_pairs: int = Field(default=3, ge=0)  # 0 disables context residuals
    strategy: Literal["label", "keyword", "random"] = "label"
    keywords: List[str] = ["Note"]
    fixed_pair: bool = True
    residual_stage: Literal["after_projection_text", "after_projection", "before_projection"] = "after_projection_text"
    seed: int = Field(default=0, ge=0)

    @property
    def enabled(self) -> bool:
        return self.n_pairs > 0


class PromptConfig(BaseModel):
    template: Optional[str] = None  # None picks the template file's default
    template_file: Optional[str] = None


class TrainConfig(BaseModel):
    epochs: int = Field(default=25, ge=0)
    batch_size: int = Field(default=8, ge=1)
    learning_rate: float = Field(default=1e-4, ge=0.0)
    loss_reduction: Literal["mean", "sum"] = "mean"
    max_grad_norm: Optional[float] = 1.0
    seed: int = Field(default=0, ge=0)
    num_workers: int = 0
    tensorboard: bool = False
    log_every: int = 10


class GenerateConfig(BaseModel):
    beam_width: int = Field(default=3, ge=1)
    max_len: int = Field(default=60, ge=1)
    length_penalty: float = 0.7
    split: Literal["train", "val", "test"] = "test"


class BenchConfig(BaseModel):
    lengths: List[int] = [256, 512, 1024, 2048, 4096]
    repeats: int = Field(default=5, ge=3)
    width: int = 64
    d_state: int = 16
    warmup: int = 3
    plot: bool = True


class RunConfig(BaseModel):
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    context: ContextConfig = ContextConfig()
    prompt: PromptConfig = PromptConfig()
    train: TrainConfig = TrainConfig()
    generate: GenerateConfig = GenerateConfig()
    bench: BenchConfig = BenchConfig()
    output_dir: str = "runs/default"

    @model_validator(mode="after")
    def _window_fits_visual_tokens(self) -> "RunConfig":
        """An explicit context window must at least hold v_s, the residuals and one full decode."""
        window = self.model.context_window
        if window is None:
            return self
        visual = backbone_config(self.model.backbone, image_size=self.data.image_size).num_tokens
        floor = visual + 2 * self.context.n_pairs + self.generate.max_len + 1
        if window < floor:
            raise ValueError(
                f"context window {window} cannot hold {visual} visual tokens, {2 * self.context.n_pairs} residuals "
                f"and a {self.generate.max_len}-token report (needs >= {floor}); leave it unset to size it automatically"
            )
        return self

    def write_echo(self, directory: Union[str, Path, None] = None) -> Path:
        directory = Path(directory or self.output_dir)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / CONFIG_ECHO
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path


# Dataset-style presets; "desk" is the laptop-scale synthetic setup.
PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "desk": {
        "data": {"image_size": 32},
        "train": {"epochs": 40, "batch_size": 8, "learning_rate": 3e-3},
        "generate": {"beam_width": 3, "max_len": 40},
    },
    "iu_xray": {
        "train": {"epochs": 25, "batch_size": 32},
        "generate": {"beam_width": 5},
    },
    "mimic_cxr": {
        "train": {"epochs": 20, "batch_size": 36},
        "generate": {"beam_width": 3},
    },
}


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _dotted(overrides: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for dotted_key, value in overrides.items():
        if value is None:
            continue
        node = nested
        *parents, leaf = dotted_key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def load_config(
    path: Union[str, Path, None] = None,
    preset: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Defaults, then the preset, then the JSON file, then dotted overrides such as {"train.epochs": 3}."""
    layered: Dict[str, Any] = {}
    if preset:
        if preset not in PRESETS:
            raise InvalidParameterError(f"unknown preset '{preset}' (available: {', '.join(PRESETS)})")
        layered = _merge(layered, PRESETS[preset])
    if path:
        layered = _merge(layered, json.loads(Path(path).read_text(encoding="utf-8")))
    layered = _merge(layered, _dotted(overrides or {}))
    try:
        config = RunConfig.model_validate(layered)
    except ValidationError as e:
        raise InvalidParameterError(f"invalid configuration: {e}") from e
    logger.debug(f"Resolved configuration: {config.model_dump()}")
    return config
