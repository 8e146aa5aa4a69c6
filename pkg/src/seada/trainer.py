"""Three-stage alternating training, LDR extraction and the noise baseline.

Per batch:

1. encoder, decoder (and style encoder) minimise reconstruction (+ style) loss;
2. the domain predictor learns to classify the domain from detached ``z``;
3. the encoder alone pushes the predictor's output on CN-only data toward
   the uniform distribution.

Each stage owns its optimizer over exactly the parameters it may change, so
every other component is bit-identical across the step.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import Sample, stack_volumes
from .ldr import LDRStore
from .nets import ADVERSARIAL, METHODS, ArchConfig, ModelBundle, encode, init_bundle, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    method: str = "SEADA"
    epochs: int = 50
    batch_size: int = 16
    lr_recon: float = 1e-3
    lr_domain: float = 1e-2
    lr_confusion: float = 1e-3
    w_recon: float = 1.0
    w_style: float = 0.1
    w_conf: float = 0.1
    seed: int = 0
    cn_only_stage3: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if min(self.w_recon, self.w_style, self.w_conf) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.method in ADVERSARIAL and not self.cn_only_stage3:
            raise ValueError("stage 3 is always CN-only for adversarial methods")


@dataclass
class LossRecord:
    step: int
    stage: int
    recon_loss: float | None = None
    style_loss: float | None = None
    domain_loss: float | None = None
    confusion_loss: float | None = None

    def values(self) -> list[float]:
        return [v for v in (self.recon_loss, self.style_loss, self.domain_loss, self.confusion_loss) if v is not None]


@dataclass
class Batch:
    """Tensors for one step. ``domain`` holds training-domain class indices."""

    x: torch.Tensor
    domain: torch.Tensor
    disease: list[str] = field(default_factory=list)

    @classmethod
    def from_arrays(cls, x, domain, disease) -> "Batch":
        x = torch.as_tensor(np.asarray(x, dtype=np.float32))
        if x.dim() == 4:
            x = x[:, None]
        return cls(x, torch.as_tensor(np.asarray(domain), dtype=torch.long), [str(d) for d in disease])


@dataclass
class TrainingData:
    x: np.ndarray  # (N, D, H, W) float32
    domain: np.ndarray  # class index over training domains
    disease: list[str]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], class_index: dict[int, int]) -> "TrainingData":
        unknown = {s.domain.index for s in samples} - set(class_index)
        if unknown:
            raise ValueError(f"training samples from non-training domains {sorted(unknown)}")
        return cls(
            stack_volumes(samples),
            np.array([class_index[s.domain.index] for s in samples], dtype=np.int64),
            [s.disease.value for s in samples],
        )

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch.from_arrays(self.x[idx], self.domain[idx], [self.disease[i] for i in idx])


class Trainer:
    """Holds a bundle plus one optimizer per training stage."""

    def __init__(self, bundle: ModelBundle, config: TrainConfig):
        if bundle.method != config.method:
            raise ValueError(f"bundle method {bundle.method} != config method {config.method}")
        self.bundle = bundle
        self.config = config
        self.step = 0
        stage1 = list(bundle.encoder.parameters()) + list(bundle.decoder.parameters())
        if bundle.style_encoder is not None:
            stage1 += list(bundle.style_encoder.parameters())
        self.opt_recon = torch.optim.Adam(stage1, lr=config.lr_recon)
        self.opt_domain = self.opt_confusion = None
        if bundle.domain_predictor is not None:
            self.opt_domain = torch.optim.Adam(bundle.domain_predictor.parameters(), lr=config.lr_domain)
            self.opt_confusion = torch.optim.Adam(bundle.encoder.parameters(), lr=config.lr_confusion)

    def _check(self, stage: int, **losses) -> None:
        for name, v in losses.items():
            if not math.isfinite(v):
                raise FloatingPointError(f"non-finite {name}={v} at step {self.step}, stage {stage} ({self.bundle.method})")

    def stage1_step(self, batch: Batch) -> LossRecord:
        b, cfg = self.bundle, self.config
        b.zero_grad(set_to_none=True)
        x_hat, _, s = b.reconstruct(batch.x, batch.domain)
        recon = F.mse_loss(x_hat, batch.x)
        loss = cfg.w_recon * recon
        style = None
        if s is not None:
            style = F.cross_entropy(s, batch.domain)
            loss = loss + cfg.w_style * style
        rec = LossRecord(self.step, 1, recon_loss=recon.item(), style_loss=None if style is None else style.item())
        self._check(1, recon=rec.recon_loss, **({} if style is None else {"style": rec.style_loss}))
        loss.backward()
        self.opt_recon.step()
        return rec

    def stage2_step(self, batch: Batch) -> LossRecord:
        b = self.bundle
        if b.domain_predictor is None:
            raise ValueError(f"stage 2 needs a domain predictor; {b.method} has none")
        b.zero_grad(set_to_none=True)
        with torch.no_grad():
            z = b.encoder(batch.x)
        loss = F.cross_entropy(b.domain_predictor(z), batch.domain)
        rec = LossRecord(self.step, 2, domain_loss=loss.item())
        self._check(2, domain=rec.domain_loss)
        loss.backward()
        self.opt_domain.step()
        return rec

    def stage3_step(self, batch: Batch) -> LossRecord:
        b, cfg = self.bundle, self.config
        if b.domain_predictor is None:
            raise ValueError(f"stage 3 needs a domain predictor; {b.method} has none")
        bad = [d for d in batch.disease if d != "CN"]
        if bad or len(batch.disease) != len(batch.x):
            raise ValueError(f"stage 3 accepts CN samples only; batch contains {sorted(set(bad)) or 'unlabelled rows'}")
        b.zero_grad(set_to_none=True)
        logp = F.log_softmax(b.domain_predictor(b.encoder(batch.x)), dim=1)
        # cross-entropy against the uniform target; floor is log K
        confusion = -logp.mean(dim=1).mean()
        rec = LossRecord(self.step, 3, confusion_loss=confusion.item())
        self._check(3, confusion=rec.confusion_loss)
        (cfg.w_conf * confusion).backward()
        self.opt_confusion.step()
        return rec


def stages_for(method: str) -> int:
    return 3 if method in ADVERSARIAL else 1


def train(data: TrainingData, config: TrainConfig, arch: ArchConfig | None = None,
          checkpoint_dir: str | Path | None = None,
          on_epoch: Callable[[int, list[LossRecord]], None] | None = None) -> tuple[ModelBundle, list[LossRecord]]:
    """Train one method from scratch; deterministic given ``config.seed``."""
    n = len(data.x)
    if n < 2:
        raise ValueError("need at least 2 training volumes")
    k = int(data.domain.max()) + 1
    arch = arch or ArchConfig(shape=tuple(data.x.shape[1:]), num_domains=k)
    if arch.num_domains != k or set(np.unique(data.domain)) != set(range(k)):
        raise ValueError(f"training data covers domains {sorted(set(data.domain))}, architecture expects {arch.num_domains}")
    cn_pool = np.array([i for i, d in enumerate(data.disease) if d == "CN"])
    if config.method in ADVERSARIAL:
        if cn_pool.size == 0:
            raise ValueError("no CN samples in the training data; stage 3 cannot run")
        missing = set(range(k)) - set(data.domain[cn_pool])
        if missing:
            raise ValueError(f"training domains {sorted(missing)} have no CN samples")

    torch.manual_seed(config.seed)
    bundle = init_bundle(arch, config.method, config.seed)
    trainer = Trainer(bundle, config)
    rng = np.random.default_rng(config.seed)
    bs = min(config.batch_size, n)
    n_batches = max(1, n // bs)
    history: list[LossRecord] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_records = []
        for j in range(n_batches):
            idx = order[j * bs:(j + 1) * bs]
            batch = data.batch(idx)
            epoch_records.append(trainer.stage1_step(batch))
            if config.method in ADVERSARIAL:
                epoch_records.append(trainer.stage2_step(batch))
                cn_idx = rng.choice(cn_pool, size=bs, replace=True)
                epoch_records.append(trainer.stage3_step(data.batch(cn_idx)))
            trainer.step += 1
        history.extend(epoch_records)
        recon = np.mean([r.recon_loss for r in epoch_records if r.recon_loss is not None])
        log.info("%s epoch %d/%d recon=%.5f", config.method, epoch + 1, config.epochs, recon)
        if on_epoch is not None:
            on_epoch(epoch, epoch_records)
        if checkpoint_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"{config.method}_epoch{epoch + 1:04d}.ckpt", bundle, trainer.step)
    bundle.eval()
    return bundle, history


def write_history(path, history: Sequence[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["step", "stage", "recon_loss", "style_loss", "domain_loss", "confusion_loss"])
        for r in history:
            w.writerow([r.step, r.stage] + ["" if v is None else repr(v) for v in
                                            (r.recon_loss, r.style_loss, r.domain_loss, r.confusion_loss)])


def read_history(path) -> list[LossRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    conv = lambda v: None if v == "" else float(v)  # noqa: E731
    return [LossRecord(int(r["step"]), int(r["stage"]), conv(r["recon_loss"]), conv(r["style_loss"]),
                       conv(r["domain_loss"]), conv(r["confusion_loss"])) for r in rows]


def extract_ldrs(bundle: ModelBundle, samples: Sequence[Sample], batch_size: int = 32) -> LDRStore:
    """Inference-mode latents for ``samples``, rows in input order."""
    bundle.eval()
    z = encode(bundle, stack_volumes(samples), batch_size=batch_size) if samples else np.zeros((0, bundle.arch.latent_dim))
    return LDRStore(
        z,
        [s.patient_id for s in samples],
        [s.disease.value for s in samples],
        [s.domain.index for s in samples],
        {s.domain.index: s.domain.name for s in samples},
        {"method": bundle.method},
    )


def add_noise(ldrs: LDRStore, sigma: float = 0.1, seed: int = 0) -> LDRStore:
    """Element-wise additive N(0, sigma^2) noise."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return ldrs.with_z(ldrs.z.copy(), noise_sigma=0.0)
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=ldrs.z.shape)
    return ldrs.with_z(ldrs.z + noise, noise_sigma=sigma)
