import hashlib
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

# Load environment variables from .env file if available
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    # dotenv not installed, continue without it
    pass

from src.settlements.errors import ConfigError


@dataclass
class TileSpec:
    """Sliding-window geometry in pixels"""
    tile_size: int = 128
    stride: Optional[int] = None

    def __post_init__(self):
        if self.stride is None:
            self.stride = max(1, self.tile_size // 2)


@dataclass
class UndersampleConfig:
    """Negatives kept per positive when balancing the training split"""
    ratio: float = 4.0
    seed: Optional[int] = None


@dataclass
class TrainConfig:
    """Mini-batch SGD hyperparameters for the baseline classifier"""
    learning_rate: float = 0.1
    epochs: int = 200
    batch_size: int = 32
    seed: Optional[int] = None
    l2: float = 1e-4


@dataclass
class PathsConfig:
    """Input and output locations"""
    raster: Optional[str] = None
    truth: Optional[str] = None
    blocks: Optional[str] = None
    output_dir: str = "output"
    predict_raster: Optional[str] = None
    eval_truth: Optional[str] = None
    model: Optional[str] = None
    scores: Optional[str] = None
    predicted: Optional[str] = None

    def __post_init__(self):
        if self.predict_raster is None:
            self.predict_raster = self.raster
        if self.eval_truth is None:
            self.eval_truth = self.truth


@dataclass
class PostprocessConfig:
    """Median filter, dissolve and block refinement parameters"""
    p_min: float = 0.5
    coverage_min: float = 0.5
    block_filter: bool = False
    supersample: int = 256


@dataclass
class PipelineConfig:
    """Top-level configuration for every pipeline command"""
    paths: PathsConfig = field(default_factory=PathsConfig)
    tiles: TileSpec = field(default_factory=TileSpec)
    undersample: UndersampleConfig = field(default_factory=UndersampleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    val_fraction: float = 0.2
    eval_resolution: int = 1
    export_min_probability: float = 0.0
    seed: int = 42
    threads: int = 1

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PipelineConfig":
        """Build a config from a parsed YAML mapping"""
        data = dict(data or {})
        sections = {
            'paths': PathsConfig,
            'tiles': TileSpec,
            'undersample': UndersampleConfig,
            'train': TrainConfig,
            'postprocess': PostprocessConfig,
        }
        kwargs = {}
        for name, section_cls in sections.items():
            section = data.pop(name, None) or {}
            if not isinstance(section, dict):
                raise ConfigError(f"Section '{name}' must be a mapping")
            known = {f.name for f in fields(section_cls)}
            unknown = set(section) - known
            if unknown:
                raise ConfigError(f"Unknown keys in '{name}': {sorted(unknown)}")
            kwargs[name] = section_cls(**section)

        known = {f.name for f in fields(cls)} - set(sections)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown top-level keys: {sorted(unknown)}")
        kwargs.update(data)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str) -> "PipelineConfig":
        """Load configuration from a YAML file"""
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid YAML in {path}: {e}") from e
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"Config root must be a mapping: {path}")
        return cls.from_dict(data or {})

    @classmethod
    def from_environment(cls) -> "PipelineConfig":
        """Load the config named by SETTLEMENT_MAP_CONFIG, or defaults"""
        config_path = os.getenv('SETTLEMENT_MAP_CONFIG')
        if config_path:
            return cls.from_file(config_path)
        return cls()

    def with_overrides(self, **overrides: Any) -> "PipelineConfig":
        """Apply command-line overrides; None values are ignored"""
        given = {k: v for k, v in overrides.items() if v is not None}
        if not given:
            return self

        routes = {
            'raster': ('paths', 'raster'),
            'truth': ('paths', 'truth'),
            'blocks': ('paths', 'blocks'),
            'out': ('paths', 'output_dir'),
            'predict_raster': ('paths', 'predict_raster'),
            'eval_truth': ('paths', 'eval_truth'),
            'model': ('paths', 'model'),
            'scores': ('paths', 'scores'),
            'predicted': ('paths', 'predicted'),
            'tile_size': ('tiles', 'tile_size'),
            'stride': ('tiles', 'stride'),
            'undersample_ratio': ('undersample', 'ratio'),
            'learning_rate': ('train', 'learning_rate'),
            'epochs': ('train', 'epochs'),
            'batch_size': ('train', 'batch_size'),
            'l2': ('train', 'l2'),
            'p_min': ('postprocess', 'p_min'),
            'coverage_min': ('postprocess', 'coverage_min'),
            'block_filter': ('postprocess', 'block_filter'),
        }

        sections = {
            'paths': self.paths,
            'tiles': self.tiles,
            'undersample': self.undersample,
            'train': self.train,
            'postprocess': self.postprocess,
        }
        section_updates: Dict[str, Dict[str, Any]] = {}
        top_updates: Dict[str, Any] = {}
        top_level = {f.name for f in fields(self)} - set(sections)
        for key, value in given.items():
            if key in routes:
                section, attr = routes[key]
                section_updates.setdefault(section, {})[attr] = value
            elif key in top_level:
                top_updates[key] = value
            else:
                raise ConfigError(f"Unknown override: {key}")

        # A new tile size without an explicit stride keeps the half-overlap default
        tiles_update = section_updates.get('tiles', {})
        if 'tile_size' in tiles_update and 'stride' not in tiles_update:
            tiles_update['stride'] = None
        # Retarget derived prediction/eval paths only if they followed the originals
        paths_update = section_updates.get('paths', {})
        if 'raster' in paths_update and 'predict_raster' not in paths_update \
                and self.paths.predict_raster == self.paths.raster:
            paths_update['predict_raster'] = None
        if 'truth' in paths_update and 'eval_truth' not in paths_update \
                and self.paths.eval_truth == self.paths.truth:
            paths_update['eval_truth'] = None

        for section, updates in section_updates.items():
            sections[section] = replace(sections[section], **updates)
        return replace(self, **sections, **top_updates)

    def validate(self) -> "PipelineConfig":
        """Check documented parameter ranges"""
        checks = [
            (self.tiles.tile_size > 0, f"tile_size must be > 0, got {self.tiles.tile_size}"),
            (0 < self.tiles.stride <= self.tiles.tile_size,
             f"stride must be in (0, tile_size], got {self.tiles.stride}"),
            (self.undersample.ratio > 0, f"undersample ratio must be > 0, got {self.undersample.ratio}"),
            (0 <= self.val_fraction < 1, f"val_fraction must be in [0, 1), got {self.val_fraction}"),
            (self.train.learning_rate > 0, f"learning_rate must be > 0, got {self.train.learning_rate}"),
            (self.train.epochs >= 1, f"epochs must be >= 1, got {self.train.epochs}"),
            (self.train.batch_size >= 1, f"batch_size must be >= 1, got {self.train.batch_size}"),
            (self.train.l2 >= 0, f"l2 must be >= 0, got {self.train.l2}"),
            (0 <= self.postprocess.p_min <= 1, f"p_min must be in [0, 1], got {self.postprocess.p_min}"),
            (self.postprocess.coverage_min >= 0,
             f"coverage_min must be >= 0, got {self.postprocess.coverage_min}"),
            (self.postprocess.supersample >= 256,
             f"supersample must be >= 256, got {self.postprocess.supersample}"),
            (self.eval_resolution >= 1, f"eval_resolution must be >= 1, got {self.eval_resolution}"),
            (0 <= self.export_min_probability <= 1,
             f"export_min_probability must be in [0, 1], got {self.export_min_probability}"),
            (self.threads >= 0, f"threads must be >= 0, got {self.threads}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def stage_seed(self, label: str) -> int:
        """Derive a reproducible 64-bit seed for one pipeline stage"""
        digest = hashlib.sha256(f"{self.seed}:{label}".encode('utf-8')).digest()
        return int.from_bytes(digest[:8], 'big')

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir)
