"""Latent-vector (LDR) tables and their binary file format.

File layout::

    b"SEADALDR" | u32 version | u64 header_len | header JSON (n, l, label schema)
    | n*l little-endian float32, row-major | u64 label_len | label JSON
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_MAGIC = b"SEADALDR"
_VERSION = 1
LABEL_FIELDS = ("patient_id", "disease", "domain")


@dataclass
class LDRStore:
    z: np.ndarray
    patient_id: list[str]
    disease: list[str]
    domain: list[int]
    domain_names: dict[int, str] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float32)
        if self.z.ndim != 2:
            raise ValueError(f"LDR matrix must be 2D, got shape {self.z.shape}")
        n = self.z.shape[0]
        if not (len(self.patient_id) == len(self.disease) == len(self.domain) == n):
            raise ValueError("label arrays must have one entry per LDR row")
        if not np.all(np.isfinite(self.z)):
            raise ValueError("LDR matrix contains non-finite entries")
        self.patient_id = [str(p) for p in self.patient_id]
        self.disease = [str(d) for d in self.disease]
        self.domain = [int(d) for d in self.domain]
        self.domain_names = {int(k): str(v) for k, v in self.domain_names.items()}

    def __len__(self) -> int:
        return self.z.shape[0]

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def subset(self, mask) -> "LDRStore":
        idx = np.flatnonzero(np.asarray(mask)) if np.asarray(mask).dtype == bool else np.asarray(mask, dtype=int)
        return LDRStore(
            self.z[idx],
            [self.patient_id[i] for i in idx],
            [self.disease[i] for i in idx],
            [self.domain[i] for i in idx],
            dict(self.domain_names),
            dict(self.meta),
        )

    def where_domain(self, domains) -> "LDRStore":
        keep = set(int(d) for d in domains)
        return self.subset(np.array([d in keep for d in self.domain], dtype=bool))

    def where_disease(self, diseases) -> "LDRStore":
        keep = set(diseases)
        return self.subset(np.array([d in keep for d in self.disease], dtype=bool))

    def where_patient(self, patients) -> "LDRStore":
        keep = set(patients)
        return self.subset(np.array([p in keep for p in self.patient_id], dtype=bool))

    def with_z(self, z, **meta) -> "LDRStore":
        return LDRStore(z, list(self.patient_id), list(self.disease), list(self.domain), dict(self.domain_names),
                        {**self.meta, **meta})


def save_ldrs(path, store: LDRStore) -> str:
    """Write ``store`` and return the SHA-256 of the file."""
    n, l = store.z.shape
    header = json.dumps({"n": n, "l": l, "dtype": "<f4", "labels": list(LABEL_FIELDS)}, sort_keys=True).encode()
    labels = json.dumps(
        {
            "patient_id": store.patient_id,
            "disease": store.disease,
            "domain": store.domain,
            "domain_names": {str(k): v for k, v in sorted(store.domain_names.items())},
            "meta": store.meta,
        },
        sort_keys=True,
    ).encode()
    payload = (
        _MAGIC
        + struct.pack("<IQ", _VERSION, len(header))
        + header
        + np.ascontiguousarray(store.z, dtype="<f4").tobytes()
        + struct.pack("<Q", len(labels))
        + labels
    )
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def load_ldrs(path) -> LDRStore:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path} is not an LDR file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != _VERSION:
        raise ValueError(f"unsupported LDR file version {version}")
    header = json.loads(raw[20:20 + hlen])
    start = 20 + hlen
    nbytes = header["n"] * header["l"] * 4
    body = raw[start:start + nbytes]
    if len(body) != nbytes or len(raw) < start + nbytes + 8:
        raise ValueError(f"{path} is truncated")
    (llen,) = struct.unpack("<Q", raw[start + nbytes:start + nbytes + 8])
    label_raw = raw[start + nbytes + 8:]
    if len(label_raw) != llen:
        raise ValueError(f"{path} label block is truncated")
    labels = json.loads(label_raw)
    z = np.frombuffer(body, dtype="<f4").reshape(header["n"], header["l"]).astype(np.float32)
    return LDRStore(z, labels["patient_id"], labels["disease"], labels["domain"],
                    {int(k): v for k, v in labels["domain_names"].items()}, labels.get("meta", {}))
