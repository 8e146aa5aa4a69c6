"""Encoder, decoder, style encoder and domain predictor, bundled per method.

Methods: ``CAE`` (encoder + decoder), ``ADA`` (+ domain predictor), ``MDADA``
(+ domain predictor, decoder whose first FC layer is branched per domain) and
``SEADA`` (+ domain predictor + style encoder whose latent is added to ``z``
before decoding).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .phantom import stable_seed

METHODS = ("CAE", "ADA", "MDADA", "SEADA")
ADVERSARIAL = ("ADA", "MDADA", "SEADA")


@dataclass
class ArchConfig:
    shape: tuple[int, int, int] = (32, 32, 32)
    latent_dim: int = 64
    num_domains: int = 5
    channels: tuple[int, ...] = (16, 32, 64, 128)
    style_channels: tuple[int, ...] = (8, 16, 32, 64)
    predictor_hidden: int = 128
    norm_groups: int = 8

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        self.channels = tuple(int(c) for c in self.channels)
        self.style_channels = tuple(int(c) for c in self.style_channels)
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        if self.num_domains < 2:
            raise ValueError("need at least 2 training domains")
        f = 2 ** len(self.channels)
        if any(n % f for n in self.shape):
            raise ValueError(f"shape {self.shape} must be divisible by {f} for {len(self.channels)} stages")

    @property
    def bottleneck(self) -> tuple[int, int, int, int]:
        f = 2 ** len(self.channels)
        return (self.channels[-1], *(n // f for n in self.shape))

    @property
    def bottleneck_size(self) -> int:
        return int(np.prod(self.bottleneck))


def _norm(cfg: ArchConfig, c: int) -> nn.Module:
    return nn.GroupNorm(min(cfg.norm_groups, c), c)


def _down(cfg, cin, cout):
    return nn.Sequential(nn.Conv3d(cin, cout, 3, stride=2, padding=1), _norm(cfg, cout), nn.SiLU())


class Encoder(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        chans = (1,) + cfg.channels
        self.stages = nn.Sequential(*[_down(cfg, a, b) for a, b in zip(chans[:-1], chans[1:])])
        self.fc = nn.Linear(cfg.bottleneck_size, cfg.latent_dim)

    def forward(self, x):
        return self.fc(self.stages(x).flatten(1))


class Decoder(nn.Module):
    """Mirror of the encoder. With ``branches > 1`` the latent-to-trunk FC
    layer is replicated per domain and everything after it is shared."""

    def __init__(self, cfg: ArchConfig, branches: int = 1):
        super().__init__()
        self.bottleneck = cfg.bottleneck
        self.fc = nn.ModuleList([nn.Linear(cfg.latent_dim, cfg.bottleneck_size) for _ in range(branches)])
        chans = cfg.channels[::-1]
        ups = []
        for a, b in zip(chans[:-1], chans[1:]):
            ups += [nn.ConvTranspose3d(a, b, 4, stride=2, padding=1), _norm(cfg, b), nn.SiLU()]
        ups += [nn.ConvTranspose3d(chans[-1], 1, 4, stride=2, padding=1), nn.Sigmoid()]
        self.trunk = nn.Sequential(*ups)

    @property
    def branches(self) -> int:
        return len(self.fc)

    def forward(self, z, domain=None):
        if self.branches == 1:
            h = self.fc[0](z)
        else:
            if domain is None:
                raise ValueError("branched decoder needs a domain per sample")
            h = torch.stack([fc(z) for fc in self.fc])[domain, torch.arange(z.shape[0])]
        return self.trunk(h.view(-1, *self.bottleneck))


class StyleEncoder(nn.Module):
    """Small conv classifier giving domain logits ``s``; the style latent is
    an MLP of ``softmax(s)`` only."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        chans = (1,) + cfg.style_channels
        self.stages = nn.Sequential(*[_down(cfg, a, b) for a, b in zip(chans[:-1], chans[1:])])
        self.classifier = nn.Linear(cfg.style_channels[-1], cfg.num_domains)
        self.head = nn.Sequential(
            nn.Linear(cfg.num_domains, cfg.latent_dim), nn.SiLU(), nn.Linear(cfg.latent_dim, cfg.latent_dim)
        )

    def logits(self, x):
        return self.classifier(self.stages(x).mean(dim=(2, 3, 4)))

    def style_latent(self, s):
        return self.head(F.softmax(s, dim=1))

    def forward(self, x):
        s = self.logits(x)
        return s, self.style_latent(s)


class DomainPredictor(nn.Module):
    """Two-layer MLP over ``z``."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(cfg.latent_dim, cfg.predictor_hidden), nn.SiLU(), nn.Linear(cfg.predictor_hidden, cfg.num_domains)
        )

    def forward(self, z):
        return self.net(z)


class ModelBundle(nn.Module):
    def __init__(self, arch: ArchConfig, method: str, encoder: nn.Module, decoder: nn.Module,
                 style_encoder: nn.Module | None = None, domain_predictor: nn.Module | None = None):
        super().__init__()
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        self.arch = arch
        self.method = method
        self.encoder = encoder
        self.decoder = decoder
        self.style_encoder = style_encoder
        self.domain_predictor = domain_predictor

    def components(self) -> dict[str, nn.Module]:
        out = {"encoder": self.encoder, "decoder": self.decoder}
        if self.style_encoder is not None:
            out["style_encoder"] = self.style_encoder
        if self.domain_predictor is not None:
            out["domain_predictor"] = self.domain_predictor
        return out

    def reconstruct(self, x, domain=None):
        """Training-mode forward used by stage 1 and evaluation.

        Returns ``(x_hat, z, s)`` where ``s`` is None unless method is SEADA.
        """
        z = self.encoder(x)
        s = None
        if self.method == "SEADA":
            s, z_k = self.style_encoder(x)
            x_hat = self.decoder(z + z_k)
        elif self.method == "MDADA":
            x_hat = self.decoder(z, domain)
        else:
            x_hat = self.decoder(z)
        return x_hat, z, s


def _built(seed: int, name: str, fn):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(stable_seed(seed, name) % (2**63))
        return fn()


def init_bundle(arch: ArchConfig, method: str, seed: int = 0) -> ModelBundle:
    """Deterministic construction. Components share their seed across methods,
    so e.g. ADA and SEADA start from the same encoder weights."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    enc = _built(seed, "encoder", lambda: Encoder(arch))
    if method == "MDADA":
        dec = _built(seed, "decoder", lambda: Decoder(arch))
        branches = [_built(seed, f"decoder-branch-{k}", lambda: nn.Linear(arch.latent_dim, arch.bottleneck_size))
                    for k in range(1, arch.num_domains)]
        dec.fc.extend(branches)
    else:
        dec = _built(seed, "decoder", lambda: Decoder(arch))
    se = _built(seed, "style_encoder", lambda: StyleEncoder(arch)) if method == "SEADA" else None
    gd = _built(seed, "domain_predictor", lambda: DomainPredictor(arch)) if method in ADVERSARIAL else None
    return ModelBundle(arch, method, enc, dec, se, gd)


# --------------------------------------------------------------------------
# inference helpers (numpy in, numpy out)
# --------------------------------------------------------------------------


def _as_batch(bundle: ModelBundle, x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float32))
    if t.dim() == 3:
        t = t[None]
    if tuple(t.shape[1:]) != bundle.arch.shape:
        raise ValueError(f"volume shape {tuple(t.shape[1:])} does not match architecture shape {bundle.arch.shape}")
    return t[:, None]


def _as_latent(bundle: ModelBundle, z) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(z, dtype=np.float32))
    if t.dim() == 1:
        t = t[None]
    if t.shape[1] != bundle.arch.latent_dim:
        raise ValueError(f"latent dimension {t.shape[1]} != {bundle.arch.latent_dim}")
    return t


def encode(bundle: ModelBundle, x, batch_size: int = 32) -> np.ndarray:
    """(N, L) latents for (N, D, H, W) volumes, or (1, L) for one volume."""
    t = _as_batch(bundle, x)
    with torch.no_grad():
        return torch.cat([bundle.encoder(t[i:i + batch_size]) for i in range(0, len(t), batch_size)]).numpy()


def style_encode(bundle: ModelBundle, x) -> tuple[np.ndarray, np.ndarray]:
    if bundle.style_encoder is None:
        raise ValueError(f"{bundle.method} bundle has no style encoder")
    with torch.no_grad():
        s, z_k = bundle.style_encoder(_as_batch(bundle, x))
    return s.numpy(), z_k.numpy()


def decode(bundle: ModelBundle, z_total) -> np.ndarray:
    if bundle.decoder.branches != 1:
        raise ValueError("MDADA bundles decode through decode_mdada")
    with torch.no_grad():
        return bundle.decoder(_as_latent(bundle, z_total))[:, 0].numpy()


def decode_mdada(bundle: ModelBundle, z, domain: int) -> np.ndarray:
    if bundle.method != "MDADA":
        raise ValueError("decode_mdada needs an MDADA bundle")
    if not 0 <= int(domain) < bundle.decoder.branches:
        raise ValueError(f"no decoder branch for domain {domain} (training domains are 0..{bundle.decoder.branches - 1})")
    t = _as_latent(bundle, z)
    with torch.no_grad():
        return bundle.decoder(t, torch.full((t.shape[0],), int(domain), dtype=torch.long))[:, 0].numpy()


def domain_predict(bundle: ModelBundle, z) -> np.ndarray:
    if bundle.domain_predictor is None:
        raise ValueError(f"{bundle.method} bundle has no domain predictor")
    with torch.no_grad():
        return bundle.domain_predictor(_as_latent(bundle, z)).numpy()


def reconstruct(bundle: ModelBundle, x, domain=None, batch_size: int = 32) -> np.ndarray:
    """Full autoencoding pass in inference mode; MDADA needs training-domain classes."""
    t = _as_batch(bundle, x)
    d = None if domain is None else torch.as_tensor(np.asarray(domain), dtype=torch.long).reshape(-1)
    if bundle.method == "MDADA" and d is None:
        raise ValueError("MDADA reconstruction needs the domain of every volume")
    outs = []
    with torch.no_grad():
        for i in range(0, len(t), batch_size):
            x_hat, _, _ = bundle.reconstruct(t[i:i + batch_size], None if d is None else d[i:i + batch_size])
            outs.append(x_hat[:, 0])
    return torch.cat(outs).numpy()


def parameter_count(module: nn.Module | None) -> int:
    return 0 if module is None else sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# checkpoints: magic, u32 version, u64 header length, JSON header, raw LE tensors
# --------------------------------------------------------------------------

_MAGIC = b"SEADACKP"
_CKPT_VERSION = 1


@dataclass
class Checkpoint:
    bundle: ModelBundle
    step: int = 0
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, bundle: ModelBundle, step: int = 0, extra: dict | None = None) -> str:
    """Write a checkpoint and return its SHA-256."""
    tensors = []
    blobs = []
    offset = 0
    for name, t in bundle.state_dict().items():
        arr = t.detach().cpu().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|="),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    arch = asdict(bundle.arch)
    header = json.dumps({"method": bundle.method, "arch": arch, "step": int(step), "extra": extra or {},
                         "tensors": tensors}, sort_keys=True).encode()
    payload = _MAGIC + struct.pack("<IQ", _CKPT_VERSION, len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    body = raw[20 + hlen:]
    bundle = init_bundle(ArchConfig(**header["arch"]), header["method"], seed=0)
    state = {}
    for rec in header["tensors"]:
        chunk = body[rec["offset"]:rec["offset"] + rec["nbytes"]]
        if len(chunk) != rec["nbytes"]:
            raise ValueError(f"checkpoint {path} truncated at tensor {rec['name']}")
        arr = np.frombuffer(chunk, dtype=np.dtype(rec["dtype"]).newbyteorder("<")).reshape(rec["shape"])
        state[rec["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    bundle.load_state_dict(state, strict=True)
    return Checkpoint(bundle, header["step"], header["extra"])


def parameter_digest(bundle: ModelBundle) -> str:
    h = hashlib.sha256()
    for name, t in bundle.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
