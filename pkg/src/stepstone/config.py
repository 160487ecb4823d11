"""Pipeline configuration: one plain-text INI file with typed sections.

Unknown sections or keys are rejected; every run artifact records the
config_hash of the resolved configuration that produced it. The artifact
root comes from --out-dir or the STEPSTONE_ROOT environment variable.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field, fields

from .alignment import AlignmentConfig
from .diffusion import ImageTrainConfig, PriorTrainConfig
from .embedder import EmbedderConfig
from .errors import ConfigError
from .field import FieldConfig
from .sds import SdsConfig
from .stylize import StyleConfig
from .svr import SvrConfig


@dataclass(frozen=True)
class DatasetConfig:
    n_scenes: int = 500
    n_views: int = 8
    resolution: int = 64
    samples_per_ray: int = 48
    camera_radius: float = 2.0
    elevation_deg: tuple = (5.0, 65.0)


@dataclass(frozen=True)
class EvalConfig:
    sweep_captions: int = 50
    consistency_captions: int = 20
    diversity_captions: int = 8
    diversity_seeds: int = 3
    grid_resolution: int = 32
    frechet_views: int = 5
    sweep_workers: int = 1
    use_prior: bool = False


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    threads: int = 0  # 0 = leave torch's default


@dataclass
class PipelineConfig:
    run: RunConfig = field(default_factory=RunConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    field_cfg: FieldConfig = field(default_factory=FieldConfig)
    svr: SvrConfig = field(default_factory=SvrConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    prior: PriorTrainConfig = field(default_factory=PriorTrainConfig)
    image_diffusion: ImageTrainConfig = field(default_factory=ImageTrainConfig)
    sds: SdsConfig = field(default_factory=SdsConfig)
    style: StyleConfig = field(default_factory=StyleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = {
        "run": "run",
        "dataset": "dataset",
        "embedder": "embedder",
        "field": "field_cfg",
        "svr": "svr",
        "alignment": "alignment",
        "prior": "prior",
        "image_diffusion": "image_diffusion",
        "sds": "sds",
        "style": "style",
        "eval": "eval",
    }

    @property
    def seed(self) -> int:
        return self.run.seed

    def replace_section(self, section: str, **updates) -> "PipelineConfig":
        attr = self.SECTIONS[section]
        new = dataclasses.replace(getattr(self, attr), **updates)
        return dataclasses.replace(self, **{attr: new})

    def canonical_lines(self) -> list:
        lines = []
        for section, attr in sorted(self.SECTIONS.items()):
            cfg = getattr(self, attr)
            for f in sorted(fields(cfg), key=lambda f: f.name):
                v = getattr(cfg, f.name)
                if isinstance(v, tuple):
                    v = ",".join(repr(x) for x in v)
                lines.append(f"{section}.{f.name}={v!r}")
        return lines

    @property
    def config_hash(self) -> str:
        blob = "\n".join(self.canonical_lines()).encode()
        return hashlib.sha256(blob).hexdigest()


def _coerce(raw: str, current):
    if raw.strip().lower() in ("none", "null"):
        return None
    if isinstance(current, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        kind = type(current[0]) if current else float
        return tuple(kind(p) for p in parts)
    if current is None:
        try:
            return int(raw)
        except ValueError:
            return float(raw)
    return raw


def load_config(path: str = None, overrides: dict = None) -> PipelineConfig:
    """Build a PipelineConfig from an INI file plus {"section.key": raw}
    overrides. Unknown sections/keys raise ConfigError."""
    cfg = PipelineConfig()
    raw_items = []
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in PipelineConfig.SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                raw_items.append((section, key, raw))
    for dotted, raw in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override must be section.key=value, got {dotted!r}")
        section, key = dotted.split(".", 1)
        raw_items.append((section, key, raw))

    for section, key, raw in raw_items:
        if section not in PipelineConfig.SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        attr = PipelineConfig.SECTIONS[section]
        sub = getattr(cfg, attr)
        names = {f.name for f in fields(sub)}
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        current = getattr(sub, key)
        try:
            value = _coerce(raw, current)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
        cfg = cfg.replace_section(section, **{key: value})
    return cfg


def default_root(explicit: str = None) -> str:
    if explicit:
        return explicit
    env = os.environ.get("STEPSTONE_ROOT")
    if env:
        return env
    return os.path.join(os.getcwd(), "stepstone-artifacts")


def micro_config() -> PipelineConfig:
    """Tiny configuration for end-to-end determinism checks and smoke runs;
    quality gates are disabled."""
    cfg = PipelineConfig()
    cfg = cfg.replace_section("dataset", n_scenes=28, n_views=4, resolution=64,
                              samples_per_ray=32)
    cfg = cfg.replace_section("embedder", epochs=4, min_val_retrieval=None,
                              channels=8)
    cfg = cfg.replace_section("field", width=32, hidden_layers=2, latent_dim=32,
                              posenc_bands=4)
    cfg = cfg.replace_section("svr", epochs=2, min_val_miou=None, batch_scenes=6,
                              rays_per_view=96, samples_per_ray=24, channels=8)
    cfg = cfg.replace_section(
        "alignment", stage1_epochs=30, d_steps=20, stage2_iters=3, m_views=3,
        n_bg_points=128, bg_max_rays=256, mapper_hidden=64,
    )
    cfg = cfg.replace_section("prior", steps=150, hidden=64, min_improvement=None)
    cfg = cfg.replace_section("image_diffusion", steps=60, channels=8,
                              min_improvement=None)
    cfg = cfg.replace_section("sds", epochs=2, render_samples=16)
    cfg = cfg.replace_section(
        "eval", sweep_captions=3, consistency_captions=4, diversity_captions=2,
        diversity_seeds=2, grid_resolution=16,
    )
    return cfg


def reference_config() -> PipelineConfig:
    """Desk-scale reference run: small decoder sized for the CPU budget."""
    cfg = PipelineConfig()
    cfg = cfg.replace_section("field", width=64, hidden_layers=3)
    return cfg
