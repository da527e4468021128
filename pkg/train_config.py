"""
train_config.py
---------------
Training configuration.

The config file is plain `[section]` / `key = value` text mirroring
TrainConfig; nested fields use dotted keys:

    [run]
    seed = 7

    [synth]
    style_jitter = 0.3

    [phase1]
    epochs = 30
    triplet.sigma = 2.0
    weights.beta1 = 0.1

Every default below is the published training setting (30/20 epochs,
256/64 inputs, Adam at 1e-3, σ/m = 2/0.6 and 1.5/1, α/β/γ weights, k = 50%).
`--set phase1.epochs=5` style overrides are applied after the file.
"""
import configparser
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from generate_faces import SynthOptions
from losses import AiawConfig, LossWeights, TripletConfig
from pad_errors import ConfigError

FUSION_MODES = ("weighted_mlp", "majority_vote", "unweighted_mlp")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Phase1Config(_Section):
    epochs: int = Field(30, gt=0)
    input_size: int = Field(256, ge=32)
    optimizer: Literal["adam"] = "adam"
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(32, ge=4)
    weights: LossWeights = LossWeights()
    triplet: TripletConfig = TripletConfig(margin=0.6, sigma=2.0)
    aiaw: AiawConfig = AiawConfig()
    use_csa: bool = True
    use_aiaw: bool = True
    use_tf: bool = True
    backbone: Literal["small", "mobilenet_v2"] = "small"
    width: float = Field(1.0, gt=0)
    pretrained: bool = False
    n_styles: int = Field(64, ge=2)
    style_momentum: float = Field(0.99, ge=0.0, le=1.0)


class Phase2Config(_Section):
    epochs: int = Field(20, gt=0)
    input_size: int = Field(64, ge=16)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(32, ge=4)
    triplet: TripletConfig = TripletConfig(margin=1.0, sigma=1.5)
    weights: LossWeights = LossWeights(alpha=1.0, beta=0.1)
    use_tf: bool = True
    backbone: Literal["small", "mobilenet_v2"] = "small"
    width: float = Field(1.0, gt=0)
    pretrained: bool = False
    n_jobs: int = Field(1, ge=1)


class AttentionConfig(_Section):
    k_percent: float = Field(50.0, gt=0.0, le=100.0)
    batch_size: int = Field(16, ge=1)


class FusionConfig(_Section):
    epochs: int = Field(20, gt=0)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(32, ge=4)
    hidden: int = Field(64, ge=1)
    mode: Literal["weighted_mlp", "majority_vote", "unweighted_mlp"] = "weighted_mlp"


class EvaluateConfig(_Section):
    threshold: float = 0.5
    fdr: float = Field(1.0, gt=0.0, le=100.0)


class RunConfig(_Section):
    seed: int = Field(7, ge=0, lt=2**63)


class TrainConfig(_Section):
    run: RunConfig = RunConfig()
    synth: SynthOptions = SynthOptions()
    phase1: Phase1Config = Phase1Config()
    phase2: Phase2Config = Phase2Config()
    attention: AttentionConfig = AttentionConfig()
    fusion: FusionConfig = FusionConfig()
    evaluate: EvaluateConfig = EvaluateConfig()

    @property
    def seed(self) -> int:
        return self.run.seed


# ------------------------------------------------------------------ helpers
def _set_dotted(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = [p.strip() for p in dotted.split(".") if p.strip()]
    if not parts:
        raise ConfigError(f"empty config key in {dotted!r}")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted!r} addresses inside a scalar value")
    node[parts[-1]] = value


def _flatten(data: Dict[str, Any], prefix: str = "") -> List[tuple]:
    items = []
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            items.extend(_flatten(value, name + "."))
        else:
            items.append((name, value))
    return items


def _validate(tree: Dict[str, Any]) -> TrainConfig:
    try:
        return TrainConfig.model_validate(tree)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"config {where}: {first['msg']}") from exc


def parse_overrides(overrides: Iterable[str]) -> List[tuple]:
    pairs = []
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if "." not in key:
            key = f"run.{key}"
        pairs.append((key, value.strip()))
    return pairs


def load_config(path=None, overrides: Iterable[str] = ()) -> TrainConfig:
    tree: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with path.open("r", encoding="utf-8") as f:
                parser.read_file(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                _set_dotted(tree, f"{section}.{key}", value)
    for key, value in parse_overrides(overrides):
        _set_dotted(tree, key, value)
    return _validate(tree)


def with_overrides(cfg: TrainConfig, overrides: Iterable[str]) -> TrainConfig:
    tree = cfg.model_dump()
    for key, value in parse_overrides(overrides):
        _set_dotted(tree, key, value)
    return _validate(tree)


def format_config(cfg: TrainConfig) -> str:
    """Serialise back to the `[section]` text format (used for config_snapshot)."""
    lines = []
    for section, values in cfg.model_dump().items():
        lines.append(f"[{section}]")
        for key, value in _flatten(values):
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: TrainConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_config(cfg), encoding="utf-8")
    return path


def override_help() -> str:
    """One `section.key=default` per line, for --help epilogs."""
    return "\n".join(f"{k}={v}" for k, v in _flatten(TrainConfig().model_dump()))
