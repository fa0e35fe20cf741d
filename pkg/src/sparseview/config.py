"""Flat INI-style run configuration with CLI overrides.

One section per subsystem, ``key = value`` pairs only. ``RunConfig.load``
and ``dump`` round-trip the file (modulo key order); ``validate`` rejects
inconsistent combinations before any work starts.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace

from .encoder import EncoderConfig
from .fusion import STRATEGIES, FusionConfig
from .pipeline import PipelineConfig, TrainConfig
from .reconstruction import ReconstructionConfig


@dataclass(frozen=True)
class DatasetConfig:
    count: int = 100
    n_views: int = 8
    resolution: int = 128
    split_train: float = 0.8
    split_val: float = 0.1
    split_test: float = 0.1
    placement_x: float = 0.35
    placement_z: float = 0.35
    radius_min: float = 3.4
    radius_max: float = 4.2
    fov_deg: float = 80.0
    fixed_elevation: float = -1.0  # negative = random in [0, 45]
    gt_res: int = 192
    seed: int = 0


@dataclass(frozen=True)
class SamplerConfig:
    points_per_figure: int = 512
    sigma: float = 0.05
    grid_size: float = 0.10
    grid_pattern: str = "light"


@dataclass(frozen=True)
class MetricsConfig:
    n_samples: int = 10_000


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    reconstruct: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    mlp_widths: tuple = (64, 256, 128, 64, 32, 1)
    intermediate_supervision: bool = True

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            encoder=self.encoder,
            fusion=self.fusion,
            mlp_widths=self.mlp_widths,
            grid_size=self.sampler.grid_size,
            grid_pattern=self.sampler.grid_pattern,
            intermediate_supervision=self.intermediate_supervision,
            concat_views=self.train.n_views,
        )

    def train_config(self) -> TrainConfig:
        return replace(
            self.train,
            points_per_figure=self.sampler.points_per_figure,
            sigma=self.sampler.sigma,
        )

    def validate(self) -> "RunConfig":
        self.pipeline_config().validate()
        self.train_config().validate()
        if self.fusion.strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.fusion.strategy}")
        if not 2 <= self.train.n_views <= self.dataset.n_views:
            raise ValueError("training view count must fit the stored views")
        splits = (
            self.dataset.split_train + self.dataset.split_val + self.dataset.split_test
        )
        if abs(splits - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")
        if self.reconstruct.resolution < 2:
            raise ValueError("reconstruction resolution must be at least 2")
        return self

    # -- serialization ------------------------------------------------------

    _SECTIONS = (
        ("dataset", "dataset"),
        ("encoder", "encoder"),
        ("fusion", "fusion"),
        ("sampler", "sampler"),
        ("train", "train"),
        ("reconstruct", "reconstruct"),
        ("metrics", "metrics"),
    )

    def dump(self, path=None) -> str:
        cp = configparser.ConfigParser()
        for section, attr in self._SECTIONS:
            cp[section] = {
                k: _fmt(v) for k, v in asdict(getattr(self, attr)).items()
            }
        cp["pipeline"] = {
            "mlp_widths": _fmt(self.mlp_widths),
            "intermediate_supervision": _fmt(self.intermediate_supervision),
        }
        buf = io.StringIO()
        cp.write(buf)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text

    @classmethod
    def load(cls, path) -> "RunConfig":
        cp = configparser.ConfigParser()
        with open(path) as f:
            cp.read_file(f)
        kwargs = {}
        for section, attr in cls._SECTIONS:
            klass = type(getattr(cls(), attr))
            if section in cp:
                kwargs[attr] = _parse_section(klass, cp[section])
        extra = cp["pipeline"] if "pipeline" in cp else {}
        if "mlp_widths" in extra:
            kwargs["mlp_widths"] = tuple(
                int(x) for x in extra["mlp_widths"].split(",") if x.strip()
            )
        if "intermediate_supervision" in extra:
            kwargs["intermediate_supervision"] = _parse_bool(
                extra["intermediate_supervision"]
            )
        return cls(**kwargs).validate()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_section(klass, section):
    kwargs = {}
    for f in fields(klass):
        if f.name not in section:
            continue
        raw = section[f.name].strip()
        if f.type in ("int", int):
            kwargs[f.name] = int(raw)
        elif f.type in ("float", float):
            kwargs[f.name] = float(raw)
        elif f.type in ("bool", bool):
            kwargs[f.name] = _parse_bool(raw)
        elif f.type in ("tuple", tuple):
            parts = [x for x in raw.split(",") if x.strip()]
            vals = tuple(float(x) if "." in x or "e" in x.lower() else int(x) for x in parts)
            kwargs[f.name] = vals
        else:
            kwargs[f.name] = raw
    return klass(**kwargs)
