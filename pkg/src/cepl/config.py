"""Experiment configuration loaded from JSON."""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .asip import BlockScheme
from .errors import CeplError, ConfigError
from .io import dumps
from .orbit import PrecisionConfig
from .partition import ConstructionConfig
from .stats import Observable

STAGES = ("construct", "stats", "asip", "report")


@dataclass(frozen=True)
class StatsSettings:
    """Normalization-table and decorrelation settings."""

    grid_points: int = 17
    orbit_length: int = 20_000_000
    burn_in: int = 10_000
    k_max: int = 30
    method: str = "batch"
    block: int = 20_000
    bins: int = 2000
    sigma_floor: float = 1e-6
    decorrelation_length: int = 1_000_000
    decorrelation_n_max: int = 30

    def __post_init__(self):
        if self.grid_points < 2:
            raise ConfigError("stats config violates invariant: grid_points >= 2")
        if self.method not in ("batch", "truncated"):
            raise ConfigError("stats config violates invariant: method in {batch, truncated}")
        if self.orbit_length < 10 * self.block and self.method == "batch":
            raise ConfigError("stats config violates invariant: orbit_length >= 10 * block")
        if self.k_max < 1 or self.decorrelation_n_max < 10:
            raise ConfigError("stats config violates invariant: k_max >= 1, decorrelation_n_max >= 10")


@dataclass(frozen=True)
class HarnessSettings:
    """Block scheme, harness constants (theta, rho overrides) and diagnostic sizes."""

    gamma: float = 0.45
    delta: float = 0.1
    K_u: int = 40
    J: int = 50
    theta: float = 0.25
    rho: float = None
    M0: float = 40.0
    n_nodes: int = 16
    clt_params: int = 2000
    clt_N: tuple = (500, 1000, 2000, 5000)
    lil_params: int = 4
    lil_N_max: int = 100_000
    vl_k: tuple = (200, 400)
    vl_params: int = 20_000
    vl_n_supp: int = 40

    def __post_init__(self):
        BlockScheme(self.gamma, self.delta)
        if self.K_u < 1 or self.J < 1:
            raise ConfigError("harness config violates invariant: K_u >= 1 and J >= 1")
        if self.clt_params < 500:
            raise ConfigError("harness config violates invariant: clt_params >= 500")
        if self.lil_N_max < 100:
            raise ConfigError("harness config violates invariant: lil_N_max >= 100")
        if self.theta is not None and not self.theta > 0:
            raise ConfigError("harness config violates invariant: theta > 0")
        if self.rho is not None and not 0 < self.rho < 1:
            raise ConfigError("harness config violates invariant: 0 < rho < 1")
        if self.n_nodes < 1 or self.vl_n_supp < 2:
            raise ConfigError("harness config violates invariant: n_nodes >= 1, vl_n_supp >= 2")


@dataclass(frozen=True)
class ExperimentConfig:
    construction: ConstructionConfig = field(default_factory=ConstructionConfig)
    observable: Observable = field(default_factory=Observable)
    stats: StatsSettings = field(default_factory=StatsSettings)
    harness: HarnessSettings = field(default_factory=HarnessSettings)
    precision: PrecisionConfig = field(default_factory=PrecisionConfig)
    master_seed: int = 0
    output_dir: str = "out"
    stages: tuple = STAGES

    def __post_init__(self):
        if not (0 <= int(self.master_seed) < 2 ** 64):
            raise ConfigError("config violates invariant: master_seed is a 64-bit unsigned integer")
        st = tuple(self.stages)
        if not st or st != STAGES[:len(st)]:
            raise ConfigError(f"config violates invariant: stages must be a prefix of {list(STAGES)}")

    def to_dict(self):
        return {
            "construction": dataclasses.asdict(self.construction),
            "observable": self.observable.to_dict(),
            "stats": dataclasses.asdict(self.stats),
            "harness": {k: list(v) if isinstance(v, tuple) else v
                        for k, v in dataclasses.asdict(self.harness).items()},
            "precision": dataclasses.asdict(self.precision),
            "master_seed": int(self.master_seed),
            "output_dir": self.output_dir,
            "stages": list(self.stages),
        }

    def hash(self):
        return config_hash(self)


def config_hash(cfg):
    """Short sha256 of the canonical config; output_dir and stages do not affect outputs."""
    d = cfg.to_dict()
    d.pop("output_dir")
    d.pop("stages")
    return hashlib.sha256(dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _section(cls, d, name):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    bad = sorted(set(d) - names)
    if bad:
        raise ConfigError(f"unknown keys in {name!r}: {bad}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (CeplError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid {name!r} section: {e}") from e


def from_dict(d):
    known = {"construction", "observable", "stats", "harness", "precision",
             "master_seed", "output_dir", "stages"}
    bad = sorted(set(d) - known)
    if bad:
        raise ConfigError(f"unknown config keys: {bad}")
    try:
        obs = Observable.from_dict(d.get("observable", {"kind": "x"}))
    except (CeplError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid 'observable' section: {e}") from e
    return ExperimentConfig(
        construction=_section(ConstructionConfig, d.get("construction"), "construction"),
        observable=obs,
        stats=_section(StatsSettings, d.get("stats"), "stats"),
        harness=_section(HarnessSettings, d.get("harness"), "harness"),
        precision=_section(PrecisionConfig, d.get("precision"), "precision"),
        master_seed=int(d.get("master_seed", 0)),
        output_dir=str(d.get("output_dir", "out")),
        stages=tuple(d.get("stages", STAGES)),
    )


def load_config(path, env=None):
    """Read a JSON config; CEPL_OUT in the environment overrides output_dir."""
    env = os.environ if env is None else env
    try:
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    if env.get("CEPL_OUT"):
        d["output_dir"] = env["CEPL_OUT"]
    return from_dict(d)


def prepare_output(cfg):
    """Create output_dir and check that it is writable."""
    try:
        os.makedirs(cfg.output_dir, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"output_dir {cfg.output_dir!r} is not writable: {e}") from e
    if not os.access(cfg.output_dir, os.W_OK):
        raise ConfigError(f"output_dir {cfg.output_dir!r} is not writable")
    return cfg.output_dir
