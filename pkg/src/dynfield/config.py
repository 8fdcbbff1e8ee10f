"""Experiment configuration: YAML files layered over built-in profiles."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from pathlib import Path

import yaml

from .geometry import DESK_SYSTEM, PAPER_SYSTEM, ImagingSystem
from .training import TrainConfig

OUTPUT_ENV = "DYNFIELD_OUTPUT"
METHODS = ("nf-tv", "pw-tv", "pw-nn", "ss")
SWEEP_AXES = ("views", "noise", "rank")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (reported as a usage error)."""


@dataclasses.dataclass(frozen=True)
class GammaGrid:
    center: float
    n: int = 10
    ratio: float = 2.0


@dataclasses.dataclass(frozen=True)
class ProxSettings:
    max_iter: int = 200
    tv_inner_iter: int = 20
    time_weight: float = 1.0
    tol: float = 1e-7


@dataclasses.dataclass(frozen=True)
class EmbedSettings:
    epochs: int = 150
    steps_per_epoch: int = 20
    samples: int = 4096
    c_samples: int | None = 16384  # None -> 4 samples per coefficient
    lr_eta0: float = 1e-2
    lr_total_decay: float = 1e-2
    ranks: tuple = (1, 2, 3, 5)
    tac_points: tuple = ((0.16, 0.10), (-0.42, -0.52))


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    system: ImagingSystem
    train: TrainConfig
    prox: ProxSettings
    embed: EmbedSettings
    methods: tuple
    sweep_axis: str
    sweep_values: tuple
    grids: dict  # method -> GammaGrid
    phantom_seed: int = 0
    noise_seed: int = 0
    generation_factor: int = 2
    supersample: int = 4
    c2d_quadrature: int | None = None  # None -> system Q
    jobs: int = 1
    output: str = "runs/desk"
    profile: str = "desk"

    def __post_init__(self):
        if self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
        if not self.sweep_values:
            raise ConfigError("sweep needs at least one value")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if self.generation_factor < 1 or self.supersample < 1 or self.jobs < 1:
            raise ConfigError("generation_factor, supersample and jobs must be >= 1")

    # -- derived -----------------------------------------------------------

    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output)

    def to_dict(self) -> dict:
        d = {
            "profile": self.profile,
            "system": self.system.to_dict(),
            "train": dataclasses.asdict(self.train),
            "prox": dataclasses.asdict(self.prox),
            "embed": _lists(dataclasses.asdict(self.embed)),
            "methods": list(self.methods),
            "sweep": {"axis": self.sweep_axis, "values": list(self.sweep_values)},
            "grids": {k: dataclasses.asdict(v) for k, v in sorted(self.grids.items())},
            "phantom_seed": self.phantom_seed,
            "noise_seed": self.noise_seed,
            "generation_factor": self.generation_factor,
            "supersample": self.supersample,
            "c2d_quadrature": self.c2d_quadrature,
            "jobs": self.jobs,
            "output": self.output,
        }
        return d

    def digest(self) -> str:
        """Hash of everything that affects results (not the output location or job count)."""
        d = self.to_dict()
        d.pop("output")
        d.pop("jobs")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def point_system(self, value) -> ImagingSystem:
        """Imaging system of one sweep point."""
        if self.sweep_axis == "views":
            return self.system.replace(views_per_frame_S=int(value))
        if self.sweep_axis == "noise":
            return self.system.replace(relative_noise=float(value))
        return self.system

    def point_name(self, value) -> str:
        if self.sweep_axis == "views":
            return f"S{int(value)}"
        if self.sweep_axis == "noise":
            return f"noise{float(value):g}"
        return f"rank{int(value)}"


def _lists(d):
    return {k: ([list(x) if isinstance(x, tuple) else x for x in v] if isinstance(v, tuple) else v)
            for k, v in d.items()}


# ----------------------------------------------------------------------------
# profiles

DESK_TRAIN = dict(
    width=40, depth=4, n_partitions=40, outer_max_iter=4, inner_epochs=30, inner_epochs_eta=8, batch_frames=2,
    lr_C0=3e-2, lr_eta0=1e-2, lr_total_decay=1e-2, static_outer_iter=2, tv_samples=2048, qnorm_samples=2048,
)

PROFILES = {
    "desk": {
        "system": dataclasses.asdict(DESK_SYSTEM),
        "train": DESK_TRAIN,
        "prox": {},
        "embed": {},
        "methods": ["nf-tv", "pw-tv", "pw-nn"],
        "sweep": {"axis": "views", "values": [2, 4, 8]},
        "grids": {"nf-tv": {"center": 64.0, "n": 3, "ratio": 4.0}, "pw-tv": {"center": 1.0, "n": 6},
                  "pw-nn": {"center": 256.0, "n": 6}},
        "output": "runs/desk",
    },
    "paper": {
        "system": dataclasses.asdict(PAPER_SYSTEM),
        "train": {},
        "prox": {},
        "embed": {"ranks": [1, 2, 3]},
        "methods": ["nf-tv", "pw-tv", "pw-nn"],
        "sweep": {"axis": "views", "values": [2, 4, 8]},
        "grids": {"nf-tv": {"center": 3.0}, "pw-tv": {"center": 3.0}, "pw-nn": {"center": 16.0}},
        "output": "runs/paper",
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "sweep":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, data: dict, what: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {what} field(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    profile = raw.pop("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    d = _merge(PROFILES[profile], raw)
    known = {"system", "train", "prox", "embed", "methods", "sweep", "grids", "phantom_seed", "noise_seed",
             "generation_factor", "supersample", "c2d_quadrature", "jobs", "output"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    emb = dict(d["embed"])
    for key in ("ranks", "tac_points"):
        if key in emb:
            emb[key] = tuple(tuple(x) if isinstance(x, list) else x for x in emb[key])
    sweep = d["sweep"]
    if not isinstance(sweep, dict) or set(sweep) != {"axis", "values"}:
        raise ConfigError("sweep must have exactly the keys 'axis' and 'values'")
    grids = {m: _build(GammaGrid, g, f"grid for {m}") for m, g in d["grids"].items()}
    try:
        return ExperimentConfig(
            system=_build(ImagingSystem, d["system"], "system"),
            train=_build(TrainConfig, d["train"], "train"),
            prox=_build(ProxSettings, d["prox"], "prox"),
            embed=_build(EmbedSettings, emb, "embed"),
            methods=tuple(d["methods"]),
            sweep_axis=sweep["axis"],
            sweep_values=tuple(sweep["values"]),
            grids=grids,
            phantom_seed=int(d.get("phantom_seed", 0)),
            noise_seed=int(d.get("noise_seed", 0)),
            generation_factor=int(d.get("generation_factor", 2)),
            supersample=int(d.get("supersample", 4)),
            c2d_quadrature=d.get("c2d_quadrature"),
            jobs=int(d.get("jobs", 1)),
            output=str(d["output"]),
            profile=profile,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load(path: str | Path | None = None, profile: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a mapping")
    if profile is not None:
        raw["profile"] = profile
    if overrides:
        raw = _merge(raw, overrides)
    return from_dict(raw)
