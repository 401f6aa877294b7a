"""Experiment configuration: a flat JSON object with typed keys."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import ConfigError
from ..model import ModelConfig


@dataclass(frozen=True)
class ExperimentConfig:
    rig_path: str = ""
    height: int = 32
    width: int = 48
    levels: int = 4
    loss_levels: int = 3
    curvature_steps: int = 3
    d_min: float = 1.0
    d_max: float = 40.0
    lambda_d: float = 0.5
    lambda_curv: float = 0.5
    lambda_rep: float = 3.0
    lambda_seg: float = 3.0
    lambda_l1: float = 0.2
    # module toggles
    stst_spatial: bool = True
    stst_temporal: bool = True
    semantic_adapter: bool = True
    depth_enhanced_pose: bool = True
    zero_init_residual: bool = False
    # loss toggles
    loss_d: bool = True
    loss_curv: bool = True
    loss_rep: bool = True
    loss_seg: bool = True
    warp_source: str = "pyramid"
    wm_align: bool = False
    # optimisation
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    warmup_fraction: float = 0.05
    steps: int = 2000
    checkpoint_every: int = 0
    # data
    train_sets: int = 48
    val_sets: int = 8
    sparse_fraction: float = 0.05
    data_seed: int = 0
    val_seed: int = 100000
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.warp_source not in ("pyramid", "full"):
            raise ConfigError(f"unknown warp_source {self.warp_source!r}")
        if not 1 <= self.loss_levels <= self.levels:
            raise ConfigError("loss_levels must lie in [1, levels]")
        if self.curvature_steps < 1:
            raise ConfigError("curvature_steps must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.train_sets < 1 or self.val_sets < 0:
            raise ConfigError("need at least one training frame-set")
        if not (self.loss_d or self.loss_curv or self.loss_rep or self.loss_seg):
            raise ConfigError("at least one loss term must be enabled")
        try:
            self.model_config()
        except ConfigError:
            raise

    # -- derived -------------------------------------------------------
    @property
    def weights(self) -> tuple:
        return (self.lambda_d, self.lambda_curv, self.lambda_rep, self.lambda_seg)

    def model_config(self, n_cameras: int = 4) -> ModelConfig:
        base = (16, 32, 64, 128, 256, 512)
        if self.levels > len(base):
            raise ConfigError(f"at most {len(base)} pyramid levels are supported")
        return ModelConfig(height=self.height, width=self.width, n_cameras=n_cameras,
                           channels=base[:self.levels], d_min=self.d_min, d_max=self.d_max,
                           stst_spatial=self.stst_spatial, stst_temporal=self.stst_temporal,
                           semantic_adapter=self.semantic_adapter,
                           depth_enhanced_pose=self.depth_enhanced_pose,
                           zero_init_residual=self.zero_init_residual, seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return from_dict({**self.to_dict(), **changes})


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def _coerce(name: str, value):
    ftype = _FIELDS[name].type
    want = _TYPES[ftype]
    if want is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if want is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if want is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if want is str and isinstance(value, str):
        return value
    if isinstance(value, str) and want in (int, float):
        try:
            return want(value)
        except ValueError:
            pass
    raise ConfigError(f"{name}: expected {ftype}, got {value!r}")


def from_dict(d: dict) -> ExperimentConfig:
    unknown = sorted(set(d) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in d.items()})


def load_config(path) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: configuration must be a flat JSON object")
    for k, v in d.items():
        if isinstance(v, (dict, list)):
            raise ConfigError(f"{path}: key {k!r} is nested; the format is flat")
    return from_dict(d)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# Module and loss ablation rows. Row 1 switches every module off but keeps the
# full objective; "rep_only" is the bare photometric baseline.
ABLATIONS = {
    "row1": dict(stst_spatial=False, stst_temporal=False, semantic_adapter=False,
                 depth_enhanced_pose=False),
    "row2": dict(semantic_adapter=False, depth_enhanced_pose=False),
    "row3": dict(depth_enhanced_pose=False),
    "row4": {},
    "row5": dict(loss_d=False),
    "row6": dict(loss_curv=False),
    "row7": {},
    # curvature alone versus curvature plus sparse depth: the metric-scale probe
    "curv_only": dict(loss_d=False, loss_rep=False, loss_seg=False),
    "curv_depth": dict(loss_rep=False, loss_seg=False),
    "rep_only": dict(stst_spatial=False, stst_temporal=False, semantic_adapter=False,
                     depth_enhanced_pose=False, loss_d=False, loss_curv=False, loss_seg=False),
}


def ablation(cfg: ExperimentConfig, row: str) -> ExperimentConfig:
    if row not in ABLATIONS:
        raise ConfigError(f"unknown ablation row {row!r}; choose from {sorted(ABLATIONS)}")
    return cfg.replace(**ABLATIONS[row])
