"""Pipeline steps shared by the CLI subcommands.

A run directory looks like::

    <out>/config.yaml          resolved config
    <out>/data/                volume store
    <out>/split.json           patient-level 8:2 split of the training domains
    <out>/models/<M>.ckpt      checkpoints, plus <M>.history.tsv
    <out>/ldrs/<M>.ldr         latents of every sample (harmonizers: transformed CAE latents)
    <out>/report.json, report.txt
"""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .combat import DesignInfo, combat_apply, combat_fit, disease_covariates
from .config import ExperimentConfig, dump_config
from .data import (
    DatasetManifest,
    Split,
    count_table,
    load_volume_store,
    make_patient_split,
    save_volume_store,
    stack_volumes,
)
from .evaluation import MethodInputs, Report, build_report, rmse, ssim3d
from .ldr import LDRStore, load_ldrs, save_ldrs
from .nets import ArchConfig, ModelBundle, load_checkpoint, reconstruct, save_checkpoint
from .phantom import generate_dataset
from .trainer import TrainingData, add_noise, extract_ldrs, train, write_history

log = logging.getLogger(__name__)


class PipelineError(Exception):
    """Failure with a stable, greppable code (``SEADA-E###``)."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


OUTPUT_EXISTS = "SEADA-E002"
MISSING_INPUT = "SEADA-E003"
BAD_METHOD = "SEADA-E004"
NO_BASELINE = "SEADA-E007"


@dataclass(frozen=True)
class RunLayout:
    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.yaml"

    @property
    def store(self) -> Path:
        return self.root / "data"

    @property
    def split(self) -> Path:
        return self.root / "split.json"

    def checkpoint(self, method: str) -> Path:
        return self.root / "models" / f"{method}.ckpt"

    def history(self, method: str) -> Path:
        return self.root / "models" / f"{method}.history.tsv"

    def ldr(self, name: str) -> Path:
        return self.root / "ldrs" / f"{name}.ldr"

    @property
    def report_json(self) -> Path:
        return self.root / "report.json"

    @property
    def report_txt(self) -> Path:
        return self.root / "report.txt"


def claim_output(path: Path, force: bool, is_dir: bool = False) -> None:
    """Refuse to clobber existing results unless ``force``."""
    path = Path(path)
    occupied = path.is_dir() and any(path.iterdir()) if is_dir else path.exists()
    if occupied:
        if not force:
            raise PipelineError(OUTPUT_EXISTS, f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    (path if is_dir else path.parent).mkdir(parents=True, exist_ok=True)


def require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise PipelineError(MISSING_INPUT, f"{what} not found at {path}")
    return Path(path)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


def gen_data(cfg: ExperimentConfig, layout: RunLayout, force: bool = False) -> DatasetManifest:
    claim_output(layout.store, force, is_dir=True)
    manifest = generate_dataset(cfg.phantom)
    save_volume_store(layout.store, manifest)
    split = training_split(manifest, cfg)
    layout.split.write_text(json.dumps({"seed": cfg.seed, "ratio": cfg.evaluation.split_ratio,
                                        "train_ids": sorted(split.train_ids), "eval_ids": sorted(split.eval_ids)},
                                       indent=1) + "\n")
    layout.config.write_text(dump_config(cfg))
    log.info("wrote %d volumes to %s", len(manifest.samples), layout.store)
    return manifest


def load_store(layout: RunLayout) -> DatasetManifest:
    return load_volume_store(require(layout.store, "volume store"))


def training_split(manifest: DatasetManifest, cfg: ExperimentConfig) -> Split:
    return make_patient_split(manifest.train_samples(), cfg.evaluation.split_ratio, cfg.seed)


def load_split(layout: RunLayout, manifest: DatasetManifest, cfg: ExperimentConfig) -> Split:
    """The split written by gen-data, so later steps cannot drift from it."""
    if layout.split.exists():
        d = json.loads(layout.split.read_text())
        return Split(frozenset(d["train_ids"]), frozenset(d["eval_ids"]))
    return training_split(manifest, cfg)


def describe(manifest: DatasetManifest) -> str:
    return count_table(manifest).render()


# --------------------------------------------------------------------------
# training and extraction
# --------------------------------------------------------------------------


def arch_for(cfg: ExperimentConfig, manifest: DatasetManifest) -> ArchConfig:
    a = cfg.arch
    return ArchConfig(shape=manifest.shape, latent_dim=a.latent_dim, num_domains=len(manifest.train_domains),
                      channels=a.channels, style_channels=a.style_channels, predictor_hidden=a.predictor_hidden,
                      norm_groups=a.norm_groups)


def train_method(cfg: ExperimentConfig, layout: RunLayout, method: str, force: bool = False,
                 manifest: DatasetManifest | None = None) -> tuple[ModelBundle, Path]:
    if method in ("NOISE", "COMBAT"):
        raise PipelineError(BAD_METHOD, f"{method} modifies extracted latents directly and has no model to train; "
                                        "use 'harmonize' on CAE latents instead")
    tcfg = cfg.train_config(method)
    ckpt = layout.checkpoint(method)
    claim_output(ckpt, force)
    manifest = manifest or load_store(layout)
    split = load_split(layout, manifest, cfg)
    samples = [s for s in manifest.train_samples() if s.patient_id in split.train_ids]
    data = TrainingData.from_samples(samples, manifest.train_class_index())
    bundle, history = train(data, tcfg, arch_for(cfg, manifest),
                            checkpoint_dir=ckpt.parent if tcfg.checkpoint_every else None)
    write_history(layout.history(method), history)
    save_checkpoint(ckpt, bundle, step=len(history), extra={"seed": tcfg.seed, "epochs": tcfg.epochs})
    return bundle, ckpt


def extract(checkpoint: Path, manifest: DatasetManifest, out: Path, force: bool = False) -> LDRStore:
    bundle = load_checkpoint(require(checkpoint, "checkpoint")).bundle
    if bundle.arch.shape != manifest.shape:
        raise PipelineError(MISSING_INPUT, f"checkpoint expects volumes of shape {bundle.arch.shape}, "
                                           f"store holds {manifest.shape}")
    claim_output(out, force)
    store = extract_ldrs(bundle, manifest.samples)
    save_ldrs(out, store)
    return store


# --------------------------------------------------------------------------
# post-hoc harmonizers
# --------------------------------------------------------------------------


def harmonize_noise(ldrs: LDRStore, sigma: float, seed: int) -> LDRStore:
    return add_noise(ldrs, sigma, seed)


def harmonize_combat(ldrs: LDRStore, fit_domains: Sequence[int], eb: bool = True,
                     covariates: bool = True) -> tuple[LDRStore, list[str]]:
    """Fit on rows of ``fit_domains`` and adjust those rows only.

    Returns the transformed rows and the patient ids that were skipped
    because their domain was not part of the fit.
    """
    fit_domains = set(int(d) for d in fit_domains)
    keep = np.array([d in fit_domains for d in ldrs.domain], dtype=bool)
    rows = ldrs.subset(keep)
    skipped = [p for p, k in zip(ldrs.patient_id, keep) if not k]
    cov = disease_covariates(rows.disease) if covariates else None
    model = combat_fit(rows.z.astype(np.float64), DesignInfo(rows.domain, cov), eb=eb)
    z = combat_apply(model, rows.z.astype(np.float64), rows.domain, cov)
    out = rows.with_z(z.astype(np.float32), harmonizer="COMBAT", combat_eb=eb, combat_covariates=covariates,
                      combat_fit_domains=sorted(fit_domains))
    return out, skipped


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

DISPLAY = {"CAE": "3D-CAE", "NOISE": "Noise", "COMBAT": "ComBat", "ADA": "ADA", "MDADA": "MD-ADA",
           "SEADA": "SE-ADA"}


def reconstruction_scores(bundle: ModelBundle, samples, class_index: dict[int, int]) -> tuple[list[float], list[float]]:
    x = stack_volumes(samples)
    domain = [class_index[s.domain.index] for s in samples] if bundle.method == "MDADA" else None
    x_hat = reconstruct(bundle, x, domain)
    return ([rmse(a, b) for a, b in zip(x, x_hat)],
            [ssim3d(np.clip(a, 0, 1), b) for a, b in zip(x, x_hat)])


def method_inputs(name: str, ldrs: LDRStore, manifest: DatasetManifest, split: Split,
                  recon: tuple[list[float], list[float]] | None = None) -> MethodInputs:
    train_dom = [d.index for d in manifest.train_domains]
    test_dom = [d.index for d in manifest.test_domains]
    in_train = ldrs.where_domain(train_dom)
    test = ldrs.where_domain(test_dom)
    return MethodInputs(
        name=name,
        ldr_train=in_train.where_patient(split.train_ids),
        ldr_eval=in_train.where_patient(split.eval_ids),
        ldr_test=test if len(test) else None,
        ldr_domain=in_train,
        ldr_cluster=test if len(set(test.where_disease(["CN"]).domain)) >= 2 else None,
        rmse=None if recon is None else recon[0],
        ssim=None if recon is None else recon[1],
    )


def evaluate(ldr_paths: dict[str, Path], checkpoints: dict[str, Path], manifest: DatasetManifest,
             split: Split, seed: int) -> Report:
    """``ldr_paths`` maps row name to LDR file; ``checkpoints`` supplies RMSE/SSIM."""
    if not any(n.split()[0] in ("CAE", "3D-CAE") for n in ldr_paths):
        raise PipelineError(NO_BASELINE, "evaluation needs the CAE baseline latents (row 'CAE')")
    eval_samples = [s for s in manifest.train_samples() if s.patient_id in split.eval_ids]
    class_index = manifest.train_class_index()
    inputs, notes = [], []
    test_dom = {d.index for d in manifest.test_domains}
    for name, path in ldr_paths.items():
        ldrs = load_ldrs(require(path, f"latents for {name}"))
        note = _combat_note(ldrs, test_dom)
        if note and note not in notes:
            notes.append(note)
        recon = None
        key = name.split()[0]
        if key in checkpoints:
            bundle = load_checkpoint(require(checkpoints[key], f"checkpoint for {key}")).bundle
            recon = reconstruction_scores(bundle, eval_samples, class_index)
        display = DISPLAY.get(key, key) + name[len(key):]
        inputs.append(method_inputs(display, ldrs, manifest, split, recon))
    report = build_report(inputs, seed=seed)
    report.notes.extend(notes)
    return report


def _combat_note(ldrs: LDRStore, test_domains: set[int]) -> str | None:
    if ldrs.meta.get("harmonizer") != "COMBAT":
        return None
    if set(ldrs.meta.get("combat_fit_domains", ())) & test_domains:
        return ("ComBat rows are fitted on every domain at once (unseen domains included) and are "
                "shown for reference only.")
    return "ComBat cannot adjust domains absent at fit time; its unseen-domain columns are n/a."


def write_report(report: Report, layout: RunLayout, force: bool = False) -> None:
    for p in (layout.report_json, layout.report_txt):
        claim_output(p, force)
    layout.report_json.write_text(report.to_json())
    layout.report_txt.write_text(report.render())


# --------------------------------------------------------------------------
# whole pipeline
# --------------------------------------------------------------------------

HARMONIZED_ROWS = ("NOISE", "COMBAT", "COMBAT no-cov")


def run_all(cfg: ExperimentConfig, root: Path, force: bool = False) -> Report:
    """Generate, train every method, extract, harmonize, evaluate."""
    layout = RunLayout(Path(root))
    if force and layout.root.exists():
        shutil.rmtree(layout.root)
    if layout.root.exists() and any(layout.root.iterdir()):
        raise PipelineError(OUTPUT_EXISTS, f"{layout.root} already exists; pass --force to overwrite")
    manifest = gen_data(cfg, layout)
    split = load_split(layout, manifest, cfg)
    ldr_paths, ckpts = {}, {}
    for m in cfg.trained_methods:
        _, ckpts[m] = train_method(cfg, layout, m, manifest=manifest)
        extract(ckpts[m], manifest, layout.ldr(m))
        ldr_paths[m] = layout.ldr(m)
    base = load_ldrs(layout.ldr("CAE"))
    if "NOISE" in cfg.methods:
        save_ldrs(layout.ldr("NOISE"), harmonize_noise(base, cfg.evaluation.noise_sigma, cfg.seed))
        ldr_paths["NOISE"] = layout.ldr("NOISE")
    if "COMBAT" in cfg.methods:
        every = [d.index for d in manifest.domains]
        for name, cov in (("COMBAT", cfg.evaluation.combat_covariates), ("COMBAT no-cov", False)):
            if name == "COMBAT no-cov" and not cfg.evaluation.combat_covariates:
                continue
            out, _ = harmonize_combat(base, every, eb=cfg.evaluation.combat_eb, covariates=cov)
            path = layout.ldr(name.replace(" ", "_"))
            save_ldrs(path, out)
            ldr_paths[name] = path
    order = [m for m in ("CAE", "NOISE", "COMBAT", "COMBAT no-cov", "ADA", "MDADA", "SEADA") if m in ldr_paths]
    report = evaluate({m: ldr_paths[m] for m in order}, ckpts, manifest, split, cfg.seed)
    write_report(report, layout)
    return report
