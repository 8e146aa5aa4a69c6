"""Synthetic multi-site, multi-disease volumetric phantoms.

Each patient gets a smooth nested-ellipsoid "brain" with a seeded
low-frequency deformation; disease is a spherical intensity loss; each
acquisition domain applies blur, gain, bias and noise. Per-sample seeds come
from hashing ``(master_seed, role, domain, disease, index)`` so output does
not depend on generation order.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ._kernels import gaussian_blur3d
from .data import DEFAULT_SHAPE, DatasetManifest, Disease, DomainId, Sample, Volume, normalize_intensity


@dataclass(frozen=True)
class DomainEffect:
    gain: float = 1.0
    bias: float = 0.0
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("gain must be positive")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise_sigma and blur_sigma must be non-negative")


@dataclass(frozen=True)
class DiseaseEffect:
    atrophy_factor: float
    lesion_center: tuple[float, float, float]
    lesion_radius: float

    def __post_init__(self):
        if not 0.0 <= self.atrophy_factor <= 1.0:
            raise ValueError("atrophy_factor must lie in [0, 1]")
        if self.lesion_radius <= 0:
            raise ValueError("lesion_radius must be positive")


@dataclass
class DomainSpec:
    name: str
    role: str  # "train" | "test"
    effect: DomainEffect
    counts: dict[str, int]

    def __post_init__(self):
        if self.role not in ("train", "test"):
            raise ValueError(f"domain {self.name}: role must be 'train' or 'test'")
        for d in self.counts:
            Disease(d)


def default_disease_effects(shape=DEFAULT_SHAPE) -> dict[str, DiseaseEffect]:
    # lesion sits in the upper-left white matter, scaled with the grid
    c = tuple(float(round(0.5 * (n - 1) + off * n, 2)) for n, off in zip(shape, (0.06, -0.14, 0.12)))
    r = 0.16 * min(shape)
    return {
        "AD": DiseaseEffect(atrophy_factor=0.25, lesion_center=c, lesion_radius=r),
        "MCI": DiseaseEffect(atrophy_factor=0.6, lesion_center=c, lesion_radius=0.8 * r),
    }


def default_domains(n_train_cn: int = 40, n_train_ad: int = 40, n_test_cn: int = 20, n_test_ad: int = 20) -> list[DomainSpec]:
    # gain rises with bias so mean intensity is ordered by bias
    train = [
        ("site-A", DomainEffect(0.85, -0.08, 0.01, 0.0)),
        ("site-B", DomainEffect(0.95, -0.03, 0.03, 1.0)),
        ("site-C", DomainEffect(1.00, 0.00, 0.00, 0.5)),
        ("site-D", DomainEffect(1.10, 0.04, 0.02, 1.5)),
        ("site-E", DomainEffect(1.20, 0.08, 0.05, 0.0)),
    ]
    test = [
        ("site-F", DomainEffect(1.05, 0.02, 0.02, 0.75)),
        ("site-G", DomainEffect(0.90, -0.05, 0.04, 1.25)),
    ]
    out = [DomainSpec(n, "train", e, {"CN": n_train_cn, "AD": n_train_ad}) for n, e in train]
    out += [DomainSpec(n, "test", e, {"CN": n_test_cn, "AD": n_test_ad}) for n, e in test]
    return out


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = DEFAULT_SHAPE
    domains: list[DomainSpec] = field(default_factory=default_domains)
    disease_effects: dict[str, DiseaseEffect] | None = None
    scans_per_patient: int = 1
    master_seed: int = 0
    voxel_size_mm: float = 2.0
    normalize: bool = False

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        if len(self.shape) != 3 or min(self.shape) <= 0:
            raise ValueError(f"bad phantom shape {self.shape}")
        if self.disease_effects is None:
            self.disease_effects = default_disease_effects(self.shape)
        if len(self.domains) < 2:
            raise ValueError("need at least 2 domains")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ValueError("domain names must be unique")
        effects = [d.effect for d in self.domains]
        if len(set(effects)) != len(effects):
            raise ValueError("every domain must differ from the others in at least one effect field")
        if not any(d.role == "train" for d in self.domains):
            raise ValueError("need at least one training domain")
        for d in self.domains:
            if d.counts.get("CN", 0) < 1:
                raise ValueError(f"domain {d.name} has no CN samples (adversarial stage needs CN data)")
            for disease, n in d.counts.items():
                if n and disease != "CN" and disease not in self.disease_effects:
                    raise ValueError(f"no disease effect configured for {disease}")
        if self.scans_per_patient < 1:
            raise ValueError("scans_per_patient must be >= 1")
        for name, eff in self.disease_effects.items():
            _check_lesion(eff, self.shape)
            rel = [(c - 0.5 * (n - 1)) / (0.5 * n) for c, n in zip(eff.lesion_center, self.shape)]
            if sum((r / a) ** 2 for r, a in zip(rel, _BRAIN_RADII)) >= 1.0:
                raise ValueError(f"{name} lesion centre lies outside the anatomy mask")


# --------------------------------------------------------------------------
# generation primitives
# --------------------------------------------------------------------------

_BRAIN_RADII = (0.78, 0.84, 0.74)


def stable_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _smooth_inside(r: np.ndarray, edge: float) -> np.ndarray:
    # ~1 for r << 1, 0.5 at r == 1
    return 0.5 * (1.0 - np.tanh((r - 1.0) / edge))


def generate_base_anatomy(patient_seed: int, shape=DEFAULT_SHAPE) -> np.ndarray:
    """Nested-shell ellipsoidal brain in [0, 1], deterministic in ``patient_seed``."""
    shape = tuple(int(n) for n in shape)
    if min(shape) <= 0:
        raise ValueError("shape must be positive")
    rng = np.random.default_rng(patient_seed)
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    g = np.meshgrid(*axes, indexing="ij")

    # low-frequency warp: a few random sinusoids per axis
    warped = []
    for a in range(3):
        disp = np.zeros(shape)
        for _ in range(3):
            freq = rng.uniform(0.5, 1.5, size=3) * np.pi
            phase = rng.uniform(0, 2 * np.pi)
            disp += rng.normal(0, 0.025) * np.sin(freq[0] * g[0] + freq[1] * g[1] + freq[2] * g[2] + phase)
        warped.append(g[a] + disp)

    radii = np.asarray(_BRAIN_RADII) * (1.0 + rng.normal(0, 0.04, size=3))
    r_brain = np.sqrt(sum((warped[a] / radii[a]) ** 2 for a in range(3)))
    vent_radii = np.array([0.16, 0.26, 0.12]) * (1.0 + rng.normal(0, 0.12, size=3))
    vent_off = np.array([0.0, 0.05, 0.0]) + rng.normal(0, 0.02, size=3)
    r_vent = np.sqrt(sum(((warped[a] - vent_off[a]) / vent_radii[a]) ** 2 for a in range(3)))

    cortex = 0.55 * (1.0 + rng.normal(0, 0.03))
    white = 0.30 * (1.0 + rng.normal(0, 0.05))
    edge = 2.0 / min(shape)
    vol = (
        cortex * _smooth_inside(r_brain, 1.5 * edge)
        + white * _smooth_inside(r_brain / 0.68, 2.5 * edge)
        - (cortex + white - 0.15) * _smooth_inside(r_vent, 4.0 * edge)
    )
    return np.clip(vol, 0.0, 1.0)


def _check_lesion(effect: DiseaseEffect, shape) -> None:
    c = np.asarray(effect.lesion_center, dtype=np.float64)
    if c.shape != (3,):
        raise ValueError("lesion_center must have 3 coordinates")
    lo = c - effect.lesion_radius
    hi = c + effect.lesion_radius
    if np.any(lo < 0) or np.any(hi > np.asarray(shape) - 1):
        raise ValueError(f"lesion at {tuple(c)} radius {effect.lesion_radius} exceeds volume bounds {tuple(shape)}")


LESION_MARGIN = 2.0


def lesion_weight(shape, effect: DiseaseEffect) -> np.ndarray:
    """1 inside the sphere, cosine falloff to 0 across a 2-voxel margin, 0 beyond."""
    idx = np.indices(shape, dtype=np.float64)
    dist = np.sqrt(sum((idx[a] - effect.lesion_center[a]) ** 2 for a in range(3)))
    t = np.clip((dist - effect.lesion_radius) / LESION_MARGIN, 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * t))


def apply_disease(vol: np.ndarray, effect: DiseaseEffect) -> np.ndarray:
    vol = np.asarray(vol)
    _check_lesion(effect, vol.shape)
    w = lesion_weight(vol.shape, effect)
    out = vol.copy()
    touched = w > 0
    out[touched] = vol[touched] * (1.0 - (1.0 - effect.atrophy_factor) * w[touched])
    return out


def apply_domain(vol: np.ndarray, effect: DomainEffect, scan_seed: int) -> np.ndarray:
    out = gaussian_blur3d(vol, effect.blur_sigma) * effect.gain + effect.bias
    if effect.noise_sigma > 0:
        out = out + np.random.default_rng(scan_seed).normal(0.0, effect.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_sample(config: PhantomConfig, domain_index: int, disease: str, patient: int, scan: int = 0) -> Sample:
    spec = config.domains[domain_index]
    patient_seed = stable_seed(config.master_seed, "anatomy", spec.name, disease, patient)
    vol = generate_base_anatomy(patient_seed, config.shape)
    if disease != "CN":
        vol = apply_disease(vol, config.disease_effects[disease])
    scan_seed = stable_seed(config.master_seed, "scan", spec.name, disease, patient, scan)
    vol = apply_domain(vol, spec.effect, scan_seed)
    if config.normalize:
        vol = normalize_intensity(vol)
    return Sample(
        volume=Volume(vol.astype(np.float32), config.voxel_size_mm),
        patient_id=f"{spec.name}-{disease}-{patient:04d}",
        disease=Disease(disease),
        domain=DomainId(domain_index, spec.name),
    )


def generate_dataset(config: PhantomConfig) -> DatasetManifest:
    """One sample per requested (domain, disease, patient, scan) entry."""
    samples = []
    for k, spec in enumerate(config.domains):
        for disease in [d.value for d in Disease]:
            for p in range(spec.counts.get(disease, 0)):
                for scan in range(config.scans_per_patient):
                    samples.append(generate_sample(config, k, disease, p, scan))
    ids = [DomainId(k, d.name) for k, d in enumerate(config.domains)]
    return DatasetManifest(
        samples,
        train_domains=tuple(i for i, d in zip(ids, config.domains) if d.role == "train"),
        test_domains=tuple(i for i, d in zip(ids, config.domains) if d.role == "test"),
        voxel_size_mm=config.voxel_size_mm,
    )
