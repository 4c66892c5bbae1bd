"""Run configuration and thread control."""
from __future__ import annotations

import dataclasses
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

_threads: int | None = None


def set_threads(n: int | None) -> None:
    """Bound internal parallelism (FFT workers). ``None`` falls back to MOCOREG_THREADS."""
    global _threads
    if n is not None and int(n) < 1:
        raise ValueError("thread count must be >= 1")
    _threads = None if n is None else int(n)


def thread_count() -> int:
    if _threads is not None:
        return _threads
    env = os.environ.get("MOCOREG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


@dataclass(frozen=True)
class RunConfig:
    """Flat key/value configuration for command-line runs.

    Every solver default lives here; results embed ``to_dict()`` so a run
    can be reproduced from its own output.
    """

    band: int = 16
    steps: int = 10
    num_channels: int = 128
    alpha: float = 3.0
    p: int = 3
    sigma2: float = 0.01
    lambda_: float = 0.5
    lambda_mode: str = "auto"
    regime: str = "small"
    seed: int = 0
    threads: int | None = None
    outer_rounds: int = 3
    deformation: bool = True
    max_iters: int = 100
    rigid_max_iters: int = 20
    tol_deg: float = 0.01
    tol_mm: float = 0.01
    auto_evaluations: int = 30
    soft_width: float = 0.2
    shape_sigma_vox: float = 2.0
    normalize: str = "range"
    smooth_mm: float = 0.0
    source: str | None = None
    target: str | None = None
    source_mask: str | None = None
    target_mask: str | None = None
    out_prefix: str | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            object.__setattr__(self, f.name, _coerce(f.name, f.type, v))
        self.validate()

    def validate(self) -> None:
        from .evaluation import REGIMES
        from .rigid_solver import NORMALIZE_MODES

        checks = [
            (self.band >= 2 and self.band % 2 == 0, "band must be an even integer >= 2"),
            (self.steps >= 1, "steps must be >= 1"),
            (self.num_channels >= 4, "num_channels must be >= 4"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.p >= 1, "p must be >= 1"),
            (self.sigma2 > 0, "sigma2 must be > 0"),
            (0.0 <= self.lambda_ <= 1.0, "lambda must lie in [0, 1]"),
            (self.lambda_mode in ("fixed", "auto"), "lambda_mode must be 'fixed' or 'auto'"),
            (self.regime in REGIMES, f"regime must be one of {sorted(REGIMES)}"),
            (self.threads is None or self.threads >= 1, "threads must be >= 1"),
            (self.outer_rounds >= 1, "outer_rounds must be >= 1"),
            (self.max_iters >= 0, "max_iters must be >= 0"),
            (self.rigid_max_iters >= 0, "rigid_max_iters must be >= 0"),
            (self.tol_deg > 0 and self.tol_mm > 0, "tolerances must be > 0"),
            (self.auto_evaluations >= 4, "auto_evaluations must be >= 4"),
            (self.soft_width > 0, "soft_width must be > 0"),
            (self.shape_sigma_vox >= 0, "shape_sigma_vox must be >= 0"),
            (self.normalize in NORMALIZE_MODES, f"normalize must be one of {NORMALIZE_MODES}"),
            (self.smooth_mm >= 0, "smooth_mm must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    # -- loading -------------------------------------------------------------

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        known = {_external(f.name): f.name for f in fields(cls)}
        unknown = sorted(k for k in data if k not in known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**{known[k]: v for k, v in data.items()})

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_bytes()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc.strerror or exc}") from None
        if path.suffix.lower() == ".toml":
            if sys.version_info >= (3, 11):
                import tomllib
            else:
                import tomli as tomllib
            try:
                data = tomllib.loads(text.decode("utf-8"))
            except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
                raise ConfigError(f"{path}: {exc}") from None
        else:
            try:
                data = json.loads(text)
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: configuration must be a flat key/value table")
        return cls.from_mapping(data)

    def updated(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> dict:
        return {_external(f.name): getattr(self, f.name) for f in fields(self)}

    # -- builders --------------------------------------------------------------

    def keypoint_config(self):
        from .volume import KeypointBankConfig

        return KeypointBankConfig(num_channels=self.num_channels, soft_width=self.soft_width)

    def joint_config(self):
        from .deform_solver import OptimizerSettings
        from .pipeline import JointConfig, ShootingConfig
        from .rigid_solver import FusionWeight, RigidSettings

        rigid = RigidSettings(
            keypoints=self.keypoint_config(),
            max_iters=self.rigid_max_iters,
            tol_deg=self.tol_deg,
            tol_mm=self.tol_mm,
            auto_evaluations=self.auto_evaluations,
        )
        shooting = ShootingConfig(self.band, self.steps, self.alpha, self.p, self.sigma2,
                                  OptimizerSettings(max_iters=self.max_iters))
        return JointConfig(self.outer_rounds, rigid, shooting, FusionWeight(self.lambda_, self.lambda_mode),
                           self.deformation)


def _external(name: str) -> str:
    return "lambda" if name == "lambda_" else name


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _coerce(name: str, typ: str, v):
    if v is None:
        if "None" in typ:
            return None
        raise ConfigError(f"{_external(name)} may not be null")
    base = typ.split("|")[0].strip()
    try:
        if base == "bool":
            if isinstance(v, str):
                return _BOOL_WORDS[v.lower()]
            if isinstance(v, (bool, int)):
                return bool(v)
            raise TypeError
        if base == "int":
            if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
                raise TypeError
            return int(v)
        if base == "float":
            if isinstance(v, bool):
                raise TypeError
            return float(v)
        if base == "str":
            if not isinstance(v, (str, Path)):
                raise TypeError
            return str(v)
    except (TypeError, ValueError, KeyError):
        raise ConfigError(f"{_external(name)}: invalid value {v!r} (expected {base})") from None
    return v
