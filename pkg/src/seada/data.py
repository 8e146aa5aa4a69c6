"""Domain types, patient-level splitting, intensity normalization and the volume store.

Store layout on disk::

    <store>/manifest.json      schema_version, shape, voxel_size_mm, domains[], samples[]
    <store>/volumes/00000.f32  raw little-endian float32, C order, one file per sample
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1
DEFAULT_SHAPE = (32, 32, 32)
PAPER_SHAPE = (80, 112, 80)


class StoreError(ValueError):
    """Raised for unreadable, truncated or inconsistent volume stores."""


class Disease(str, Enum):
    CN = "CN"
    AD = "AD"
    MCI = "MCI"


@dataclass(frozen=True)
class DomainId:
    index: int
    name: str


@dataclass
class Volume:
    """A 3D intensity grid. ``data`` is (depth, height, width)."""

    data: np.ndarray
    voxel_size_mm: float = 2.0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        if self.voxel_size_mm <= 0:
            raise ValueError("voxel_size_mm must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.data, dtype=dtype)


@dataclass
class Sample:
    volume: Volume
    patient_id: str
    disease: Disease
    domain: DomainId

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")
        self.disease = Disease(self.disease)


@dataclass
class DatasetManifest:
    samples: list[Sample]
    train_domains: tuple[DomainId, ...]
    test_domains: tuple[DomainId, ...]
    voxel_size_mm: float = 2.0

    def __post_init__(self):
        train = {d.index for d in self.train_domains}
        test = {d.index for d in self.test_domains}
        if train & test:
            raise ValueError(f"domains {sorted(train & test)} are both train and test")
        indices = sorted(train | test)
        if indices != list(range(len(indices))):
            raise ValueError("domain indices must be dense 0..K-1")
        for s in self.samples:
            if s.domain.index not in train | test:
                raise ValueError(f"sample {s.patient_id} has undeclared domain {s.domain}")

    @property
    def domains(self) -> list[DomainId]:
        return sorted(self.train_domains + self.test_domains, key=lambda d: d.index)

    @property
    def num_domains(self) -> int:
        return len(self.train_domains) + len(self.test_domains)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.samples[0].volume.shape if self.samples else DEFAULT_SHAPE

    def train_samples(self) -> list[Sample]:
        keep = {d.index for d in self.train_domains}
        return [s for s in self.samples if s.domain.index in keep]

    def test_samples(self) -> list[Sample]:
        keep = {d.index for d in self.test_domains}
        return [s for s in self.samples if s.domain.index in keep]

    def train_class_index(self) -> dict[int, int]:
        """Maps manifest domain index -> dense class index over training domains."""
        return {d.index: i for i, d in enumerate(sorted(self.train_domains, key=lambda d: d.index))}


@dataclass(frozen=True)
class Split:
    train_ids: frozenset[str]
    eval_ids: frozenset[str]

    def __post_init__(self):
        if self.train_ids & self.eval_ids:
            raise ValueError("patient ids present on both sides of the split")


def normalize_intensity(vol, sigma_mult: float = 4.0) -> np.ndarray:
    """Clamp negatives to 0 and values above ``sigma_mult`` sigma, then rescale to [0, 1].

    Sigma is the standard deviation of the strictly positive voxels after the
    negative clamp (a per-volume brain-foreground estimate). A volume with no
    positive voxel is returned unchanged.
    """
    x = np.asarray(vol, dtype=np.float64)
    if sigma_mult <= 0:
        raise ValueError("sigma_mult must be positive")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot normalize a volume with non-finite values")
    x = np.maximum(x, 0.0)
    fg = x[x > 0]
    if fg.size == 0:
        return x
    sigma = fg.std()
    if sigma == 0:
        # flat foreground: sigma undefined, map the single level to 1
        return (x > 0).astype(np.float64)
    top = sigma_mult * sigma
    return np.minimum(x, top) / top


def make_patient_split(manifest: DatasetManifest | Sequence[Sample], ratio: float = 0.8, seed: int = 0) -> Split:
    samples = manifest.samples if isinstance(manifest, DatasetManifest) else list(manifest)
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    patients = sorted({s.patient_id for s in samples})
    if len(patients) < 2:
        raise ValueError("need at least 2 patients to split")
    order = np.random.default_rng(seed).permutation(len(patients))
    n_train = int(round(ratio * len(patients)))
    n_train = min(max(n_train, 1), len(patients) - 1)
    train = frozenset(patients[i] for i in order[:n_train])
    return Split(train_ids=train, eval_ids=frozenset(patients) - train)


# --------------------------------------------------------------------------
# volume store
# --------------------------------------------------------------------------


def _domain_records(manifest: DatasetManifest) -> list[dict]:
    train = {d.index for d in manifest.train_domains}
    return [
        {"index": d.index, "name": d.name, "role": "train" if d.index in train else "test"}
        for d in manifest.domains
    ]


def save_volume_store(path: str | os.PathLike, manifest: DatasetManifest) -> Path:
    path = Path(path)
    (path / "volumes").mkdir(parents=True, exist_ok=True)
    shape = list(manifest.shape)
    records = []
    for i, s in enumerate(manifest.samples):
        if list(s.volume.shape) != shape:
            raise StoreError(f"sample {i} ({s.patient_id}) has shape {s.volume.shape}, store shape is {shape}")
        fname = f"volumes/{i:05d}.f32"
        (path / fname).write_bytes(np.ascontiguousarray(s.volume.data, dtype="<f4").tobytes())
        records.append(
            {"file": fname, "patient_id": s.patient_id, "disease": s.disease.value, "domain": s.domain.index}
        )
    header = {
        "schema_version": SCHEMA_VERSION,
        "shape": shape,
        "voxel_size_mm": manifest.voxel_size_mm,
        "domains": _domain_records(manifest),
        "samples": records,
    }
    (path / "manifest.json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return path


def read_store_header(path: str | os.PathLike) -> dict:
    path = Path(path)
    try:
        header = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise StoreError(f"no manifest.json in {path}") from exc
    except json.JSONDecodeError as exc:
        raise StoreError(f"corrupt manifest header in {path}: {exc}") from exc
    for key in ("schema_version", "shape", "voxel_size_mm", "domains", "samples"):
        if key not in header:
            raise StoreError(f"manifest in {path} lacks '{key}'")
    if header["schema_version"] != SCHEMA_VERSION:
        raise StoreError(f"unsupported store schema_version {header['schema_version']}")
    return header


def load_volume_store(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    header = read_store_header(path)
    shape = tuple(int(v) for v in header["shape"])
    if len(shape) != 3 or min(shape) <= 0:
        raise StoreError(f"bad store shape {shape}")
    n_expected = int(np.prod(shape)) * 4
    domains = {d["index"]: DomainId(int(d["index"]), d["name"]) for d in header["domains"]}
    train = tuple(domains[d["index"]] for d in header["domains"] if d["role"] == "train")
    test = tuple(domains[d["index"]] for d in header["domains"] if d["role"] == "test")
    samples = []
    for i, rec in enumerate(header["samples"]):
        where = f"sample {i} ({rec.get('patient_id', '?')}, {rec.get('file', '?')})"
        try:
            raw = (path / rec["file"]).read_bytes()
        except (KeyError, FileNotFoundError) as exc:
            raise StoreError(f"{where}: volume file missing") from exc
        if len(raw) != n_expected:
            raise StoreError(f"{where}: expected {n_expected} bytes for shape {shape}, found {len(raw)}")
        if rec["domain"] not in domains:
            raise StoreError(f"{where}: unknown domain {rec['domain']}")
        data = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        samples.append(
            Sample(
                volume=Volume(data, header["voxel_size_mm"]),
                patient_id=rec["patient_id"],
                disease=Disease(rec["disease"]),
                domain=domains[rec["domain"]],
            )
        )
    return DatasetManifest(samples, train, test, voxel_size_mm=header["voxel_size_mm"])


def store_hash(path: str | os.PathLike) -> str:
    """SHA-256 over the manifest and every volume file, in manifest order."""
    path = Path(path)
    h = hashlib.sha256((path / "manifest.json").read_bytes())
    for rec in read_store_header(path)["samples"]:
        h.update((path / rec["file"]).read_bytes())
    return h.hexdigest()


def stack_volumes(samples: Iterable[Sample]) -> np.ndarray:
    """(N, D, H, W) float32 array."""
    return np.stack([np.asarray(s.volume.data, dtype=np.float32) for s in samples])


@dataclass
class CountTable:
    rows: list[tuple[str, str, dict[str, int]]] = field(default_factory=list)

    def render(self) -> str:
        diseases = [d.value for d in Disease]
        lines = [f"{'domain':<14}{'role':<7}" + "".join(f"{d:>6}" for d in diseases) + f"{'total':>7}"]
        for name, role, counts in self.rows:
            lines.append(
                f"{name:<14}{role:<7}"
                + "".join(f"{counts.get(d, 0) or '-':>6}" for d in diseases)
                + f"{sum(counts.values()):>7}"
            )
        return "\n".join(lines)


def count_table(manifest: DatasetManifest) -> CountTable:
    train = {d.index for d in manifest.train_domains}
    table = CountTable()
    for d in manifest.domains:
        counts: dict[str, int] = {}
        for s in manifest.samples:
            if s.domain.index == d.index:
                counts[s.disease.value] = counts.get(s.disease.value, 0) + 1
        table.rows.append((d.name, "train" if d.index in train else "test", counts))
    return table
