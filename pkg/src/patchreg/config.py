"""Run configuration: one JSON document with a section per component.

Sections are ``train``, ``net``, ``stitch``, ``loss``, ``phantom`` and
``data``. Every key is optional; unknown sections or keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .network import NetConfig
from .stitcher import StitchConfig
from .training import TrainConfig
from .volume_io import PhantomSpec


@dataclass
class DataConfig:
    n_train: int = 8
    n_test: int = 4
    # draw fresh training deformations every epoch after the first
    resample_train: bool = False

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")


_SECTIONS = {
    "train": TrainConfig,
    "net": NetConfig,
    "stitch": StitchConfig,
    "loss": LossWeights,
    "phantom": PhantomSpec,
    "data": DataConfig,
}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    net: NetConfig = field(default_factory=NetConfig)
    stitch: StitchConfig = field(default_factory=StitchConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        # the loss section is the single source for training weights
        self.train.weights = self.loss

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            d = asdict(getattr(self, name))
            d.pop("weights", None)
            out[name] = _jsonable(d)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _build(cls, values: dict, section: str):
    allowed = {f.name for f in fields(cls)} - {"weights"}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    kwargs = dict(values)
    if cls is PhantomSpec and "dims" in kwargs:
        kwargs["dims"] = tuple(kwargs["dims"])
    try:
        obj = cls(**kwargs)
        if isinstance(obj, PhantomSpec):
            obj.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}]: {exc}") from None
    return obj


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    parts = {}
    for name, cls in _SECTIONS.items():
        values = doc.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"section [{name}] must be an object")
        parts[name] = _build(cls, values, name)
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    """Parse a config file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError:
        raise
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(doc)
