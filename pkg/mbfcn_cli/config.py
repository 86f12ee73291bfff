"""Configuration files for mbfcn-cli.

A configuration file holds ``key = value`` lines with dotted keys, ``#``
comments and blank lines, for example::

    model.name = C345(8)-C45(16)
    branch.1.sources = C3,C4,C5
    branch.1.stride = 8
    train.base_lr = 0.001
"""

import re
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from rich.console import Console
from rich.table import Table

from mbfcn_cli.errors import ConfigError, InputError
from mbfcn_cli.model import BackboneConfig, BranchConfig, ModelConfig
from mbfcn_cli.training import TrainConfig
from mbfcn_cli.utils import parse_float_list
from mbfcn_cli.validators import validate_model_config, validate_train_config

console = Console(stderr=True)

_BRANCH_KEY = re.compile(r"^branch\.(\d+)\.(sources|stride|head_dim|anchor_sizes|anchor_ratios)$")
_MODEL_KEYS = ("model.name", "backbone.widths", "backbone.convs_per_stage", "backbone.kernel")
_INT_TRAIN_FIELDS = {
    "lr_decay_every",
    "max_iters",
    "batch_per_branch",
    "max_side",
    "seed",
    "log_every",
    "checkpoint_every",
}
_LIST_TRAIN_FIELDS = {"lambdas": "lambda", "gammas": "gamma"}


def _train_keys() -> Dict[str, str]:
    keys = {}
    for f in fields(TrainConfig):
        keys[f"train.{_LIST_TRAIN_FIELDS.get(f.name, f.name)}"] = f.name
    return keys


class ConfigFile:
    """Dotted-key store read from and written to the line-oriented format."""

    def __init__(self, source: str = "<config>"):
        self.source = source
        self.data: Dict[str, str] = {}
        self.lines: Dict[str, int] = {}

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ConfigFile":
        """
        Parse configuration text.

        Args:
            text: File content
            source: Name used in error messages

        Returns:
            ConfigFile

        Raises:
            ConfigError: malformed line, unknown key or duplicate key
        """
        config = cls(source)
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{line_no}: expected 'key = value', got '{raw.strip()}'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not config.is_known(key):
                raise ConfigError(f"{source}:{line_no}: unknown key '{key}'")
            if key in config.data:
                first = config.lines[key]
                raise ConfigError(f"{source}:{line_no}: duplicate key '{key}' (first set on line {first})")
            config.data[key] = value
            config.lines[key] = line_no
        return config

    @classmethod
    def load(cls, path: Path) -> "ConfigFile":
        path = Path(path)
        try:
            text = path.read_text()
        except FileNotFoundError:
            raise InputError(f"configuration file not found: {path}") from None
        return cls.from_text(text, str(path))

    @staticmethod
    def is_known(key: str) -> bool:
        return key in _MODEL_KEYS or key in _train_keys() or bool(_BRANCH_KEY.match(key))

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get configuration value.

        Args:
            key: Dotted key such as 'train.base_lr'
            default: Returned when the key is not set

        Returns:
            Raw text value or default
        """
        return self.data.get(key, default)

    def set(self, key: str, value: Any) -> None:
        if not self.is_known(key):
            raise ConfigError(f"{self.source}: unknown key '{key}'")
        self.data[key] = str(value)

    def where(self, key: str) -> str:
        line = self.lines.get(key)
        return f"{self.source}:{line}" if line else self.source

    def to_text(self) -> str:
        return "".join(f"{key} = {value}\n" for key, value in self.data.items())

    def show(self) -> None:
        """Display the configuration as a table."""
        table = Table(title=f"Configuration ({self.source})")
        table.add_column("Key", style="cyan")
        table.add_column("Value", style="green")
        for key, value in self.data.items():
            table.add_row(key, value)
        if not self.data:
            table.add_row("No keys", "defaults apply")
        console.print(table)

    def _convert(self, key: str, kind, default=None):
        text = self.get(key)
        if text is None:
            return default
        try:
            if kind is int:
                return int(text)
            if kind is float:
                return float(text)
            if kind is list:
                values = parse_float_list(text)
                if not values:
                    raise ValueError("empty list")
                return tuple(values)
            if kind is tuple:
                return tuple(item.strip() for item in text.split(",") if item.strip())
        except ValueError:
            raise ConfigError(f"{self.where(key)}: invalid value '{text}' for '{key}'") from None
        return text

    def _branches(self) -> Optional[Tuple[BranchConfig, ...]]:
        indices = sorted({int(_BRANCH_KEY.match(key).group(1)) for key in self.data if _BRANCH_KEY.match(key)})
        if not indices:
            return None
        if indices != list(range(1, len(indices) + 1)):
            raise ConfigError(f"{self.source}: branch indices must be 1..K without gaps, got {indices}")
        branches = []
        for k in indices:
            prefix = f"branch.{k}"
            for required in ("sources", "stride"):
                if self.get(f"{prefix}.{required}") is None:
                    raise ConfigError(f"{self.source}: missing key '{prefix}.{required}'")
            options: Dict[str, Any] = {}
            if self.get(f"{prefix}.head_dim") is not None:
                options["head_dim"] = self._convert(f"{prefix}.head_dim", int)
            if self.get(f"{prefix}.anchor_sizes") is not None:
                options["anchor_sizes"] = self._convert(f"{prefix}.anchor_sizes", list)
            if self.get(f"{prefix}.anchor_ratios") is not None:
                options["anchor_ratios"] = self._convert(f"{prefix}.anchor_ratios", list)
            branches.append(
                BranchConfig(
                    sources=self._convert(f"{prefix}.sources", tuple),
                    target_stride=self._convert(f"{prefix}.stride", int),
                    **options,
                )
            )
        return tuple(branches)

    def model_config(self) -> ModelConfig:
        backbone_options: Dict[str, Any] = {}
        if self.get("backbone.widths") is not None:
            widths = self._convert("backbone.widths", tuple)
            try:
                backbone_options["widths"] = tuple(int(w) for w in widths)
            except ValueError:
                raise ConfigError(f"{self.where('backbone.widths')}: widths must be integers") from None
        if self.get("backbone.convs_per_stage") is not None:
            backbone_options["convs_per_stage"] = self._convert("backbone.convs_per_stage", int)
        if self.get("backbone.kernel") is not None:
            backbone_options["kernel"] = self._convert("backbone.kernel", int)
        options: Dict[str, Any] = {
            "backbone": BackboneConfig(**backbone_options),
            "label": self.get("model.name", ""),
        }
        branches = self._branches()
        if branches is not None:
            options["branches"] = branches
        model = ModelConfig(**options)
        try:
            validate_model_config(model)
        except ConfigError as e:
            raise ConfigError(f"{self.source}: {e}") from None
        return model

    def train_config(self, num_branches: int) -> TrainConfig:
        options: Dict[str, Any] = {}
        for key, name in _train_keys().items():
            if self.get(key) is None:
                continue
            if name in _LIST_TRAIN_FIELDS:
                options[name] = self._convert(key, list)
            elif name in _INT_TRAIN_FIELDS:
                options[name] = self._convert(key, int)
            else:
                options[name] = self._convert(key, float)
        train = TrainConfig(**options)
        try:
            validate_train_config(train, num_branches)
        except ConfigError as e:
            raise ConfigError(f"{self.source}: {e}") from None
        return train


def parse_config_text(text: str, source: str = "<config>") -> Tuple[ModelConfig, TrainConfig]:
    """Parse configuration text into exactly one (ModelConfig, TrainConfig) pair."""
    config = ConfigFile.from_text(text, source)
    model = config.model_config()
    return model, config.train_config(len(model.branches))


def parse_config(path: Path) -> Tuple[ModelConfig, TrainConfig]:
    """Parse a configuration file; omitted keys take their defaults."""
    config = ConfigFile.load(path)
    model = config.model_config()
    return model, config.train_config(len(model.branches))


def _join(values) -> str:
    return ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in values)


def render_config(model: ModelConfig, train: TrainConfig) -> str:
    """Serialize both configurations; ``parse_config_text`` reads the result back unchanged."""
    lines: List[str] = []
    if model.label:
        lines.append(f"model.name = {model.label}")
    backbone = model.backbone
    lines.append(f"backbone.widths = {_join(backbone.widths)}")
    lines.append(f"backbone.convs_per_stage = {backbone.convs_per_stage}")
    lines.append(f"backbone.kernel = {backbone.kernel}")
    for k, branch in enumerate(model.branches, start=1):
        lines.append(f"branch.{k}.sources = {','.join(branch.sources)}")
        lines.append(f"branch.{k}.stride = {branch.target_stride}")
        lines.append(f"branch.{k}.head_dim = {branch.head_dim}")
        lines.append(f"branch.{k}.anchor_sizes = {_join(branch.anchor_sizes)}")
        lines.append(f"branch.{k}.anchor_ratios = {_join(branch.anchor_ratios)}")
    for key, name in _train_keys().items():
        value = getattr(train, name)
        if isinstance(value, tuple):
            text = _join(value)
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
