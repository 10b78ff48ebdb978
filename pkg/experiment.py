# experiment.py
from __future__ import annotations

import hashlib
import json
import logging
import sys
from dataclasses import MISSING, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - Python 3.10 backport
    import tomli as tomllib

import numpy as np

from errors import ConfigError, InvalidSpec
from evaluation import EvalConfig
from frontend import FrontendConfig, OdometryConfig
from graphcore import OptimizeConfig
from merge import MergeConfig
from placerec import PlaceRecConfig
from registration import RegistrationConfig
from robustsel import PcmConfig
from simworld import LidarModel, OdometryModel, RobotSpec, SegmentSpec, WorldSpec

logger = logging.getLogger(__name__)

ROBUST_FLAGS = {"none": "none", "gnc": "gnc_tls", "gnc_tls": "gnc_tls"}


@dataclass
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    lidar: LidarModel = field(default_factory=LidarModel)
    robots: list[RobotSpec] = field(default_factory=list)
    odometry_model: OdometryModel = field(default_factory=OdometryModel)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    placerec: PlaceRecConfig = field(default_factory=PlaceRecConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    pcm: PcmConfig = field(default_factory=PcmConfig)
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: Optional[str] = None
    # keyframe PLY dump and descriptor CSV next to each robot's odometry output
    dump_keyframes: bool = False
    verify_symmetry: bool = False
    config_hash: str = ""

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        ids = [r.robot for r in self.robots]
        if len(set(ids)) != len(ids):
            raise ConfigError("robots", f"duplicate robot ids {ids}")

    @property
    def robot_ids(self) -> list[int]:
        return sorted(r.robot for r in self.robots)

    def for_seed(self, seed: int) -> "ExperimentConfig":
        """World roughness and wheel noise keyed on the run seed."""
        return replace(
            self,
            world=replace(self.world, seed=seed),
            odometry_model=replace(self.odometry_model, seed=seed),
        )

    def merge_config(self, use_filter: bool, use_pcm: bool) -> MergeConfig:
        return MergeConfig(
            use_filter=use_filter,
            use_pcm=use_pcm,
            sc_threshold=self.placerec.threshold,
            robust=self.optimize.robust,
            keyframe_distance=self.frontend.keyframe_distance,
            verify_symmetry=self.verify_symmetry,
            placerec=self.placerec,
            registration=self.registration,
            pcm=self.pcm,
            optimize=self.optimize,
        )

    def with_robust(self, flag: str) -> "ExperimentConfig":
        if flag not in ROBUST_FLAGS:
            raise ConfigError("robust", f"unknown mode {flag!r}")
        return replace(self, optimize=replace(self.optimize, robust=ROBUST_FLAGS[flag]))


def scan_seed(seed: int, robot: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, robot, index]).generate_state(1)[0])


# ═══════════════════════════════════════
# TOML → DATACLASSES
# ═══════════════════════════════════════

def _check_type(value: Any, default: Any, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
    elif isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool) and not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")


def _default(f) -> Any:
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return MISSING


def _section(cls, data: Any, key: str, nested: Optional[dict[str, Callable[[Any, str], Any]]] = None):
    if not isinstance(data, dict):
        raise ConfigError(key, "expected a table")
    nested = nested or {}
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for name, value in data.items():
        dotted = f"{key}.{name}"
        if name not in known or name == "config_hash":
            raise ConfigError(dotted, "unknown key")
        if name in nested:
            kwargs[name] = nested[name](value, dotted)
            continue
        default = _default(known[name])
        if default is not MISSING and default is not None:
            _check_type(value, default, dotted)
            if isinstance(default, float) and isinstance(value, int):
                value = float(value)
        kwargs[name] = value
    missing = [n for n, f in known.items() if _default(f) is MISSING and n not in kwargs]
    if missing:
        raise ConfigError(f"{key}.{missing[0]}", "required key is missing")
    try:
        return cls(**kwargs)
    except (ConfigError, InvalidSpec) as e:
        # validators name the field by its own section; re-root it under this key
        inner = e.key if isinstance(e, ConfigError) else e.field
        leaf = inner.split(".", 1)[1] if "." in inner else inner
        raise ConfigError(f"{key}.{leaf}", e.reason) from e
    except (TypeError, ValueError) as e:
        raise ConfigError(key, str(e)) from e


def _table_list(cls, nested=None) -> Callable[[Any, str], list]:
    def build(value: Any, key: str) -> list:
        if not isinstance(value, list):
            raise ConfigError(key, "expected an array of tables")
        return [_section(cls, item, f"{key}[{n}]", nested) for n, item in enumerate(value)]
    return build


def _table(cls, nested=None) -> Callable[[Any, str], Any]:
    return lambda value, key: _section(cls, value, key, nested)


def _seeds(value: Any, key: str) -> list[int]:
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ConfigError(key, "expected an array of integers")
    return list(value)


def config_hash(data: dict) -> str:
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def parse_config(data: dict, path: Optional[str] = None) -> ExperimentConfig:
    nested = {
        "world": _table(WorldSpec, {"segments": _table_list(SegmentSpec)}),
        "lidar": _table(LidarModel),
        "robots": _table_list(RobotSpec),
        "odometry_model": _table(OdometryModel),
        "frontend": _table(FrontendConfig, {"odometry": _table(OdometryConfig)}),
        "placerec": _table(PlaceRecConfig),
        "registration": _table(RegistrationConfig),
        "pcm": _table(PcmConfig),
        "optimize": _table(OptimizeConfig),
        "eval": _table(EvalConfig),
        "seeds": _seeds,
    }
    try:
        cfg = _section(ExperimentConfig, data, "config", nested)
    except ConfigError as e:
        key = e.key[len("config."):] if e.key.startswith("config.") else e.key
        raise ConfigError(key, e.reason, path) from e
    cfg.config_hash = config_hash(data)
    return cfg


def load_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", "file not found", str(path))
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("config", f"invalid TOML ({e})", str(path)) from e
    cfg = parse_config(data, str(path))
    logger.info(f"Loaded {path}: {len(cfg.robots)} robots, {len(cfg.world.segments)} segments, seeds={cfg.seeds}")
    return cfg
