"""Pipeline configuration: flat key-value file with one section per stage.

Unknown sections or keys are hard errors -- a typo that silently falls back
to a default makes runs impossible to reproduce.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass
class PreprocConfig:
    alpha: float = 0.8
    low_percentile: float = 0.01
    high_percentile: float = 0.99
    clahe_clip_limit: float = 3.0
    clahe_tiles: int = 8


@dataclass
class FeaturesConfig:
    provider: str = "builtin"  # builtin | file
    max_points: int = 500
    tau_hamming: int = 64
    stereo_row_tol: float = 2.0


@dataclass
class DynfilterConfig:
    enabled: bool = True
    epipolar_tau: float = 0.5
    ransac_iters: int = 200
    dilate_px: int = 3


@dataclass
class TrackingConfig:
    dual_level: bool = True  # photometric pre-alignment before matching
    search_radius: float = 15.0
    min_inliers: int = 15
    reproj_gate: float = 2.0
    pyramid_levels: int = 3


@dataclass
class MappingConfig:
    max_gap: int = 20
    kf_inlier_ratio: float = 0.75
    covisible_k: int = 5
    d_min: float = 2.0
    local_ba_iterations: int = 10


@dataclass
class LoopcloseConfig:
    enabled: bool = True
    word_radius: int = 48
    tau_inliers: int = 20
    island_span: int = 3
    exclude_recent: int = 30
    consecutive_islands: int = 2
    residual_form: str = "conventional"  # conventional | printed
    pose_graph_iterations: int = 20
    global_ba_iterations: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    sync: bool = False  # asynchronous is the performance default
    threads: int = 0  # 0 = library default
    best_of: int = 1


_SECTIONS = {
    "preproc": PreprocConfig,
    "features": FeaturesConfig,
    "dynfilter": DynfilterConfig,
    "tracking": TrackingConfig,
    "mapping": MappingConfig,
    "loopclose": LoopcloseConfig,
    "run": RunConfig,
}

_CHOICES = {
    ("features", "provider"): ("builtin", "file"),
    ("loopclose", "residual_form"): ("conventional", "printed"),
}


@dataclass
class PipelineConfig:
    preproc: PreprocConfig = field(default_factory=PreprocConfig)
    features: FeaturesConfig = field(default_factory=FeaturesConfig)
    dynfilter: DynfilterConfig = field(default_factory=DynfilterConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    loopclose: LoopcloseConfig = field(default_factory=LoopcloseConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self):
        checks = [
            (0.0 < self.preproc.alpha < 1.0, "preproc.alpha in (0, 1)"),
            (0.0 <= self.preproc.low_percentile < self.preproc.high_percentile <= 1.0,
             "preproc percentiles ordered in [0, 1]"),
            (self.preproc.clahe_tiles >= 1, "preproc.clahe_tiles >= 1"),
            (self.features.max_points >= 1, "features.max_points >= 1"),
            (0 <= self.features.tau_hamming <= 256, "features.tau_hamming in [0, 256]"),
            (self.dynfilter.epipolar_tau > 0, "dynfilter.epipolar_tau > 0"),
            (self.tracking.search_radius > 0, "tracking.search_radius > 0"),
            (self.tracking.min_inliers >= 4, "tracking.min_inliers >= 4"),
            (self.mapping.max_gap >= 1, "mapping.max_gap >= 1"),
            (0.0 < self.mapping.kf_inlier_ratio <= 1.0, "mapping.kf_inlier_ratio in (0, 1]"),
            (self.mapping.d_min > 0, "mapping.d_min > 0"),
            (0 < self.loopclose.word_radius <= 256, "loopclose.word_radius in (0, 256]"),
            (self.loopclose.island_span >= 1, "loopclose.island_span >= 1"),
            (self.run.best_of >= 1, "run.best_of >= 1"),
        ]
        for key, allowed in _CHOICES.items():
            section, name = key
            val = getattr(getattr(self, section), name)
            checks.append((val in allowed, f"{section}.{name} one of {allowed}"))
        for ok, what in checks:
            if not ok:
                raise ConfigError(f"config constraint violated: {what}")
        return self

    def canonical_text(self) -> str:
        """Fully expanded, deterministic serialization (hash input)."""
        lines = []
        for section, cls in _SECTIONS.items():
            lines.append(f"[{section}]")
            sub = getattr(self, section)
            for f in fields(cls):
                lines.append(f"{f.name} = {getattr(sub, f.name)!r}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


def _coerce(section, name, raw, target_type):
    raw = raw.strip()
    try:
        if target_type is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return target_type(raw)
    except ValueError:
        raise ConfigError(
            f"bad value for {section}.{name}: {raw!r} (expected {target_type.__name__})"
        )


def load_config(path) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}")
    cfg = PipelineConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        sub = getattr(cfg, section)
        types = {f.name: type(getattr(sub, f.name)) for f in fields(_SECTIONS[section])}
        for name, raw in parser.items(section):
            if name not in types:
                raise ConfigError(f"unknown config key {section}.{name}")
            setattr(sub, name, _coerce(section, name, raw, types[name]))
    return cfg.validate()


def save_config(path, cfg: PipelineConfig):
    with open(path, "w") as fh:
        for section in _SECTIONS:
            fh.write(f"[{section}]\n")
            sub = getattr(cfg, section)
            for f in fields(_SECTIONS[section]):
                fh.write(f"{f.name} = {getattr(sub, f.name)}\n")
            fh.write("\n")
