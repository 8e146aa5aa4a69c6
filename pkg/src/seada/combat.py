"""Parametric empirical-Bayes (ComBat) location/scale harmonization of feature matrices.

Features are standardised with a least-squares fit of batch indicators plus
optional covariates; per-batch location ``gamma`` and scale ``delta`` are
then estimated on the standardised data and, with ``eb=True``, shrunk toward
normal / inverse-gamma priors whose hyperparameters are moment-matched
across features. Only batches seen at fit time can be adjusted.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

_DEGENERATE = 1e-24


class UnknownBatchError(ValueError):
    """A row belongs to a batch that was absent when the model was fitted."""


@dataclass
class DesignInfo:
    batch: Sequence[Hashable]
    covariates: np.ndarray | None = None

    def __post_init__(self):
        self.batch = list(self.batch)
        if self.covariates is not None:
            self.covariates = np.asarray(self.covariates, dtype=np.float64)
            if self.covariates.ndim == 1:
                self.covariates = self.covariates[:, None]
            if self.covariates.shape[0] != len(self.batch):
                raise ValueError("covariate rows must match batch labels")
            if self.covariates.shape[1] == 0:
                self.covariates = None


@dataclass
class CombatModel:
    batches: list
    n_per_batch: list[int]
    grand_mean: np.ndarray  # (L,)
    cov_coef: np.ndarray  # (p, L), p = 0 without covariates
    var_pooled: np.ndarray  # (L,)
    gamma_hat: np.ndarray  # (B, L)
    delta_hat: np.ndarray  # (B, L), variances
    gamma_star: np.ndarray
    delta_star: np.ndarray
    eb: bool = True
    n_iter: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.batches:
            raise ValueError("fitted batch set is empty")
        if np.any(self.delta_star <= 0):
            raise ValueError("delta_star must be positive")

    @property
    def n_features(self) -> int:
        return self.grand_mean.shape[0]

    def to_json(self) -> str:
        # arrays are nested batch-major, then feature index
        d = {
            "batches": self.batches,
            "n_per_batch": self.n_per_batch,
            "grand_mean": self.grand_mean.tolist(),
            "cov_coef": self.cov_coef.tolist(),
            "n_covariates": int(self.cov_coef.shape[0]),
            "var_pooled": self.var_pooled.tolist(),
            "gamma_hat": self.gamma_hat.tolist(),
            "delta_hat": self.delta_hat.tolist(),
            "gamma_star": self.gamma_star.tolist(),
            "delta_star": self.delta_star.tolist(),
            "eb": self.eb,
            "n_iter": self.n_iter,
        }
        return json.dumps(d, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CombatModel":
        d = json.loads(text)
        n_feat = len(d["grand_mean"])
        arr = lambda k: np.asarray(d[k], dtype=np.float64)  # noqa: E731
        return cls(
            batches=d["batches"],
            n_per_batch=d["n_per_batch"],
            grand_mean=arr("grand_mean"),
            cov_coef=np.asarray(d["cov_coef"], dtype=np.float64).reshape(d["n_covariates"], n_feat),
            var_pooled=arr("var_pooled"),
            gamma_hat=arr("gamma_hat"),
            delta_hat=arr("delta_hat"),
            gamma_star=arr("gamma_star"),
            delta_star=arr("delta_star"),
            eb=d["eb"],
            n_iter=d["n_iter"],
        )


def _invgamma_hyper(delta_hat: np.ndarray) -> tuple[float, float]:
    m = delta_hat.mean()
    s2 = delta_hat.var(ddof=1)
    return m * m / s2 + 2, m**3 / s2 + m


def _shrink(z: np.ndarray, g_hat, d_hat, tol: float, max_iter: int, trace: list | None):
    """Iterated conditional posterior means for one batch."""
    n = z.shape[0]
    n_feat = z.shape[1]
    if n_feat < 2:
        return g_hat, d_hat, 0
    g_bar = g_hat.mean()
    tau2 = g_hat.var(ddof=1)
    s2 = d_hat.var(ddof=1)
    if tau2 <= _DEGENERATE or s2 <= _DEGENERATE:
        # prior collapses onto the (already uniform) estimates
        return g_hat, d_hat, 0
    lam, theta = _invgamma_hyper(d_hat)
    g_old, d_old = g_hat, d_hat
    for it in range(1, max_iter + 1):
        g_new = (n * tau2 * g_hat + d_old * g_bar) / (n * tau2 + d_old)
        d_new = (0.5 * ((z - g_new) ** 2).sum(axis=0) + theta) / (0.5 * n + lam - 1)
        if np.any(d_new <= 0):
            raise FloatingPointError(f"non-positive scale estimate at iteration {it}")
        if trace is not None:
            trace.append(float(d_new.min()))
        change = max(
            np.max(np.abs(g_new - g_old) / np.maximum(np.abs(g_old), 1e-12)),
            np.max(np.abs(d_new - d_old) / d_old),
        )
        g_old, d_old = g_new, d_new
        if change < tol:
            break
    return g_old, d_old, it


def _grand_fit(model: CombatModel, covariates, n: int) -> np.ndarray:
    p = model.cov_coef.shape[0]
    if p == 0:
        return np.broadcast_to(model.grand_mean, (n, model.n_features))
    if covariates is None:
        raise ValueError(f"model was fitted with {p} covariates; pass them to combat_apply")
    cov = np.asarray(covariates, dtype=np.float64).reshape(n, p)
    return model.grand_mean + cov @ model.cov_coef


def combat_fit(features, design: DesignInfo, eb: bool = True, tol: float = 1e-6, max_iter: int = 100,
               trace: dict | None = None) -> CombatModel:
    """Fit per-feature location/scale batch adjustments.

    ``trace``, if given, receives ``{batch: [min delta per iteration, ...]}``.
    """
    y = np.asarray(features, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError("features must be an (N, L) matrix")
    n, n_feat = y.shape
    if len(design.batch) != n:
        raise ValueError("one batch label per row required")
    batches = sorted(set(design.batch), key=lambda b: (str(type(b)), b))
    idx = [np.array([i for i, b in enumerate(design.batch) if b == bb]) for bb in batches]
    for bb, ii in zip(batches, idx):
        if len(ii) < 2:
            raise ValueError(f"batch {bb!r} has {len(ii)} row(s); at least 2 required")
    x_batch = np.zeros((n, len(batches)))
    for j, ii in enumerate(idx):
        x_batch[ii, j] = 1.0
    cov = design.covariates
    x = x_batch if cov is None else np.hstack([x_batch, cov])
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise ValueError("design (batch indicators + covariates) is not full column rank")

    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    n_b = np.array([len(ii) for ii in idx], dtype=np.float64)
    grand_mean = (n_b / n) @ coef[: len(batches)]
    cov_coef = coef[len(batches):] if cov is not None else np.zeros((0, n_feat))
    var_pooled = np.mean((y - x @ coef) ** 2, axis=0)
    zero = np.flatnonzero(var_pooled <= 1e-20 * np.maximum(1.0, np.mean(y * y, axis=0)))
    if zero.size:
        raise ValueError(f"feature {int(zero[0])} has zero pooled variance")
    stand = grand_mean + (0 if cov is None else cov @ cov_coef)
    z = (y - stand) / np.sqrt(var_pooled)

    gamma_hat = np.stack([z[ii].mean(axis=0) for ii in idx])
    delta_hat = np.stack([z[ii].var(axis=0) for ii in idx])
    gamma_star, delta_star, iters = gamma_hat.copy(), delta_hat.copy(), [0] * len(batches)
    if eb:
        for j, ii in enumerate(idx):
            tr = [] if trace is not None else None
            gamma_star[j], delta_star[j], iters[j] = _shrink(z[ii], gamma_hat[j], delta_hat[j], tol, max_iter, tr)
            if trace is not None:
                trace[batches[j]] = tr
    return CombatModel(
        batches=batches,
        n_per_batch=[int(v) for v in n_b],
        grand_mean=grand_mean,
        cov_coef=cov_coef,
        var_pooled=var_pooled,
        gamma_hat=gamma_hat,
        delta_hat=delta_hat,
        gamma_star=gamma_star,
        delta_star=delta_star,
        eb=eb,
        n_iter=iters,
    )


def combat_apply(model: CombatModel, features, batch_labels: Sequence[Hashable], covariates=None) -> np.ndarray:
    y = np.asarray(features, dtype=np.float64)
    labels = list(batch_labels)
    if y.ndim != 2 or y.shape[1] != model.n_features:
        raise ValueError(f"expected (N, {model.n_features}) features, got {y.shape}")
    if len(labels) != y.shape[0]:
        raise ValueError("one batch label per row required")
    pos = {b: j for j, b in enumerate(model.batches)}
    unknown = sorted({b for b in labels if b not in pos}, key=str)
    if unknown:
        raise UnknownBatchError(
            f"batch(es) {unknown} were not seen at fit time; ComBat cannot harmonize unseen domains"
        )
    j = np.array([pos[b] for b in labels], dtype=np.int64)
    stand = _grand_fit(model, covariates, y.shape[0])
    sd = np.sqrt(model.var_pooled)
    z = (y - stand) / sd
    return (z - model.gamma_star[j]) / np.sqrt(model.delta_star[j]) * sd + stand


def combat(features, design: DesignInfo, eb: bool = True) -> np.ndarray:
    """Fit and apply on the same rows."""
    model = combat_fit(features, design, eb=eb)
    return combat_apply(model, features, design.batch, design.covariates)


def disease_covariates(diseases: Sequence[str], levels: Sequence[str] | None = None) -> np.ndarray | None:
    """One-hot disease indicators without the reference (first) level."""
    levels = list(levels) if levels is not None else sorted(set(diseases), key=lambda d: (d != "CN", d))
    if len(levels) < 2:
        return None
    return np.array([[1.0 if d == lvl else 0.0 for lvl in levels[1:]] for d in diseases])
