"""Experiment configuration: one YAML file with an explicit ``schema_version``.

Unknown keys anywhere in the tree are hard errors. Every section is optional
and falls back to the built-in defaults, so ``{schema_version: 1}`` is a
complete config.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .nets import METHODS as TRAINED_METHODS
from .phantom import DiseaseEffect, DomainEffect, DomainSpec, PhantomConfig, default_domains
from .trainer import TrainConfig

CONFIG_SCHEMA_VERSION = 1
HARMONIZERS = ("NOISE", "COMBAT")
ALL_METHODS = ("CAE", "NOISE", "COMBAT", "ADA", "MDADA", "SEADA")


class ConfigError(ValueError):
    pass


@dataclass
class ArchSettings:
    latent_dim: int = 64
    channels: tuple[int, ...] = (16, 32, 64, 128)
    style_channels: tuple[int, ...] = (8, 16, 32, 64)
    predictor_hidden: int = 128
    norm_groups: int = 8


@dataclass
class EvalSettings:
    split_ratio: float = 0.8
    knn_k: int = 5
    probe_steps: int = 500
    noise_sigma: float = 0.1
    combat_eb: bool = True
    combat_covariates: bool = True

    def __post_init__(self):
        if not 0 < self.split_ratio < 1:
            raise ConfigError("evaluation.split_ratio must lie in (0, 1)")
        if self.knn_k < 1 or self.probe_steps < 1:
            raise ConfigError("evaluation.knn_k and evaluation.probe_steps must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("evaluation.noise_sigma must be non-negative")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output: str = "runs/default"
    methods: tuple[str, ...] = ALL_METHODS
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    train: dict[str, TrainConfig] = field(default_factory=dict)
    arch: ArchSettings = field(default_factory=ArchSettings)
    evaluation: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        bad = [m for m in self.methods if m not in ALL_METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; expected a subset of {ALL_METHODS}")
        if "CAE" not in self.methods:
            raise ConfigError("methods must include the CAE baseline")
        for m in self.trained_methods:
            self.train.setdefault(m, TrainConfig(method=m, seed=self.seed))

    @property
    def trained_methods(self) -> list[str]:
        return [m for m in self.methods if m in TRAINED_METHODS]

    def train_config(self, method: str) -> TrainConfig:
        if method in HARMONIZERS:
            raise ConfigError(f"{method} is a post-hoc LDR transform, not a trainable model")
        if method not in TRAINED_METHODS:
            raise ConfigError(f"unknown method {method!r}")
        return self.train.get(method) or TrainConfig(method=method, seed=self.seed)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment under another master seed."""
        return replace(
            self,
            seed=seed,
            phantom=replace(self.phantom, master_seed=seed),
            train={m: replace(c, seed=seed) for m, c in self.train.items()},
        )


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------


def _check_keys(section: str, data: Any, allowed) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")
    return data


def _names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def _build(cls, section: str, data, **fixed):
    data = _check_keys(section, data, [n for n in _names(cls) if n not in fixed])
    try:
        return cls(**data, **fixed)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


_DOMAIN_KEYS = ("name", "role", "gain", "bias", "noise_sigma", "blur_sigma", "counts")


def _parse_domain(i: int, d) -> DomainSpec:
    sec = f"phantom.domains[{i}]"
    d = _check_keys(sec, d, _DOMAIN_KEYS)
    for key in ("name", "role"):
        if key not in d:
            raise ConfigError(f"{sec}: missing '{key}'")
    try:
        effect = DomainEffect(**{k: float(d[k]) for k in ("gain", "bias", "noise_sigma", "blur_sigma") if k in d})
        counts = {str(k): int(v) for k, v in _check_keys(f"{sec}.counts", d.get("counts", {"CN": 40, "AD": 40}),
                                                         ("CN", "AD", "MCI")).items()}
        return DomainSpec(str(d["name"]), str(d["role"]), effect, counts)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{sec}: {exc}") from None


def _parse_phantom(data, seed: int) -> PhantomConfig:
    keys = ("shape", "voxel_size_mm", "scans_per_patient", "normalize", "domains", "disease_effects")
    data = dict(_check_keys("phantom", data, keys))
    if "domains" in data:
        data["domains"] = [_parse_domain(i, d) for i, d in enumerate(data["domains"] or [])]
    else:
        data["domains"] = default_domains()
    if data.get("disease_effects") is not None:
        effects = {}
        for name, eff in _check_keys("phantom.disease_effects", data["disease_effects"], ("AD", "MCI")).items():
            eff = _check_keys(f"phantom.disease_effects.{name}", eff,
                              ("atrophy_factor", "lesion_center", "lesion_radius"))
            try:
                effects[name] = DiseaseEffect(float(eff["atrophy_factor"]), tuple(float(c) for c in eff["lesion_center"]),
                                              float(eff["lesion_radius"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"phantom.disease_effects.{name}: {exc}") from None
        data["disease_effects"] = effects
    try:
        return PhantomConfig(master_seed=seed, **data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"phantom: {exc}") from None


def _parse_training(data, methods, seed: int) -> dict[str, TrainConfig]:
    tunable = [n for n in _names(TrainConfig) if n not in ("method", "seed")]
    data = _check_keys("training", data, ("defaults",) + TRAINED_METHODS)
    defaults = _check_keys("training.defaults", data.get("defaults"), tunable)
    out = {}
    for m in methods:
        if m not in TRAINED_METHODS:
            continue
        over = _check_keys(f"training.{m}", data.get(m), tunable)
        out[m] = _build(TrainConfig, f"training.{m}", {**defaults, **over}, method=m, seed=seed)
    return out


_TOP = ("schema_version", "seed", "output", "methods", "phantom", "training", "arch", "evaluation")


def parse_config(data: dict | None, seed: int | None = None, output: str | None = None) -> ExperimentConfig:
    """Validate a decoded YAML mapping; ``seed``/``output`` override the file."""
    data = _check_keys("config", data if data is not None else {}, _TOP)
    version = data.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {CONFIG_SCHEMA_VERSION}, got {version!r}")
    seed = int(data.get("seed", 0) if seed is None else seed)
    methods = tuple(str(m).upper() for m in data.get("methods", ALL_METHODS))
    arch = data.get("arch") or {}
    arch = {k: tuple(v) if isinstance(v, list) else v for k, v in arch.items()}
    return ExperimentConfig(
        seed=seed,
        output=str(output if output is not None else data.get("output", "runs/default")),
        methods=methods,
        phantom=_parse_phantom(data.get("phantom"), seed),
        train=_parse_training(data.get("training"), methods, seed),
        arch=_build(ArchSettings, "arch", arch),
        evaluation=_build(EvalSettings, "evaluation", data.get("evaluation")),
    )


def load_config(path: str | Path | None, seed: int | None = None, output: str | None = None) -> ExperimentConfig:
    if path is None:
        return parse_config({"schema_version": CONFIG_SCHEMA_VERSION}, seed, output)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({str(exc).splitlines()[0]})") from None
    return parse_config(data, seed, output)


def dump_config(cfg: ExperimentConfig) -> str:
    """Round-trippable YAML for ``cfg`` (written next to every run)."""
    ph = cfg.phantom
    phantom = {
        "shape": list(ph.shape),
        "voxel_size_mm": ph.voxel_size_mm,
        "scans_per_patient": ph.scans_per_patient,
        "normalize": ph.normalize,
        "domains": [{"name": d.name, "role": d.role, **asdict(d.effect), "counts": dict(d.counts)} for d in ph.domains],
    }
    if ph.disease_effects is not None:
        phantom["disease_effects"] = {k: {"atrophy_factor": e.atrophy_factor, "lesion_center": list(e.lesion_center),
                                          "lesion_radius": e.lesion_radius} for k, e in ph.disease_effects.items()}
    training = {m: {k: v for k, v in asdict(c).items() if k not in ("method", "seed")} for m, c in cfg.train.items()}
    arch = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg.arch).items()}
    doc = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "seed": cfg.seed,
        "output": cfg.output,
        "methods": list(cfg.methods),
        "phantom": phantom,
        "training": training,
        "arch": arch,
        "evaluation": asdict(cfg.evaluation),
    }
    return yaml.safe_dump(doc, sort_keys=False)
