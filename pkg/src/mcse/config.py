"""Toolkit configuration: one structured YAML file, strict keys, every
default documented at the field that owns it (published setting vs
implementation choice). CLI flags override file values; each run echoes
the fully resolved config next to its outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .am import TdnnConfig
from .dsp import FrameParams
from .frontend import FrontendConfig, FusionSpec
from .metrics import LossWeights
from .roomsim import DatasetRecipe
from .spatial import ArrayGeometry, default_positions
from .tcn import TcnConfig
from .training import BmufConfig, TrainConfig


@dataclass
class BmufSection(BmufConfig):
    enabled: bool = False


@dataclass
class ToolkitConfig:
    frame: FrameParams = field(default_factory=FrameParams)
    geometry: ArrayGeometry = field(default_factory=ArrayGeometry)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    tcn: TcnConfig = field(default_factory=TcnConfig)
    am: TdnnConfig = field(default_factory=TdnnConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    bmuf: BmufSection = field(default_factory=BmufSection)
    dataset: DatasetRecipe = field(default_factory=DatasetRecipe)

    @classmethod
    def paper_profile(cls) -> "ToolkitConfig":
        """Full-scale settings (20 ms/512 FFT, 257 filters, 128/512 backbone)."""
        return cls()

    @classmethod
    def desk_profile(cls) -> "ToolkitConfig":
        """CPU-sized profile: 16 ms/256 FFT (129 bins), small backbone and
        classifier; wiring semantics identical to full scale."""
        frame = FrameParams(sample_rate=16000, win_len=256, hop=128, fft_len=256)
        return cls(
            frame=frame,
            frontend=FrontendConfig.desk_scale(bins=frame.bins),
            tcn=TcnConfig.desk_scale(input_dim=0),
            am=TdnnConfig.desk_scale(input_dim=frame.bins),
            dataset=DatasetRecipe(),
        )

    def bmuf_or_none(self):
        return self.bmuf if self.bmuf.enabled else None


_SECTION_TYPES = {
    "frame": FrameParams,
    "geometry": ArrayGeometry,
    "frontend": FrontendConfig,
    "tcn": TcnConfig,
    "am": TdnnConfig,
    "loss": LossWeights,
    "trainer": TrainConfig,
    "bmuf": BmufSection,
    "dataset": DatasetRecipe,
}

_TUPLE_FIELDS = {
    ("frontend", "icd_pairs"): lambda v: tuple(tuple(p) for p in v),
    ("frontend", "sdbf_subset"): tuple,
    ("am", "context"): tuple,
    ("dataset", "snr_range"): tuple,
    ("dataset", "absorption_range"): tuple,
    ("dataset", "height_range"): tuple,
    ("dataset", "clean_pool"): tuple,
    ("dataset", "noise_pool"): tuple,
}


def _build_section(name: str, cls, data: dict):
    if not isinstance(data, dict):
        raise ValueError(f"config section {name!r} must be a mapping")
    field_names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - field_names
    if unknown:
        raise ValueError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if name == "frontend" and key in ("fusion1", "fusion2", "fusion3"):
            value = FusionSpec(
                in_panels=value["in_panels"], out_panels=value["out_panels"],
                kernel=tuple(value.get("kernel", (5, 3))),
                stride=tuple(value.get("stride", (2, 1))),
            )
        elif name == "geometry" and key == "mic_positions":
            value = np.asarray(value, dtype=np.float64)
        elif name == "dataset" and key == "mic_layout":
            value = np.asarray(value, dtype=np.float64)
        elif (name, key) in _TUPLE_FIELDS:
            value = _TUPLE_FIELDS[(name, key)](value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ToolkitConfig:
    if not isinstance(data, dict):
        raise ValueError("config root must be a mapping")
    unknown = set(data) - set(_SECTION_TYPES)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {name: _build_section(name, cls, data[name])
              for name, cls in _SECTION_TYPES.items() if name in data}
    return ToolkitConfig(**kwargs)


def _plain(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, FusionSpec):
        return {"in_panels": value.in_panels, "out_panels": value.out_panels,
                "kernel": list(value.kernel), "stride": list(value.stride)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, Path):
        return str(value)
    return value


def config_to_dict(cfg: ToolkitConfig) -> dict:
    out = {}
    for name, cls in _SECTION_TYPES.items():
        section = getattr(cfg, name)
        out[name] = {f.name: _plain(getattr(section, f.name)) for f in dataclasses.fields(cls)}
    return out


def load_config(path=None, overrides: dict | None = None) -> ToolkitConfig:
    """Read a YAML config and apply {section: {key: value}} overrides.

    A top-level `profile: desk|paper` key picks the base defaults the
    file amends (desk when no file is given); flags win over the file.
    """
    file_data = {}
    if path is not None:
        file_data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(file_data, dict):
            raise ValueError(f"{path}: config root must be a mapping")
    profile = file_data.pop("profile", "paper" if path is not None else "desk")
    if profile == "desk":
        base = config_to_dict(ToolkitConfig.desk_profile())
    elif profile == "paper":
        base = config_to_dict(ToolkitConfig.paper_profile())
    else:
        raise ValueError(f"unknown profile {profile!r}; expected 'desk' or 'paper'")
    for section, content in file_data.items():
        if section in base and isinstance(content, dict):
            base[section].update(content)
        else:
            base[section] = content
    for section, content in (overrides or {}).items():
        base.setdefault(section, {}).update(content)
    return config_from_dict(base)


def save_config(cfg: ToolkitConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
