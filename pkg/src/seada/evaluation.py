"""Evaluation criteria for LDRs and the summary report.

A. preservation: ``rmse`` and windowed ``ssim3d`` of reconstructions
B. diagnosis: k-NN (cosine) CN-vs-AD probe, ``diag_f1``
C. domain leakage: fresh linear softmax probe, ``domain_f1``
D. CN-cluster structure: six indices vs domain labels, ``clustering_indices``
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaln

from . import _kernels
from .ldr import LDRStore

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03

CLUSTER_INDICES = ("silhouette", "homogeneity", "completeness", "v_measure", "ari", "ami")


# --------------------------------------------------------------------------
# A. reconstruction quality
# --------------------------------------------------------------------------


def _same_shape(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def rmse(x, y) -> float:
    x, y = _same_shape(x, y)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def ssim3d(x, y, window: int = SSIM_WINDOW, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully contained ``window**3`` uniform windows."""
    x, y = _same_shape(x, y)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx = _kernels.box_mean3d(x, window)
    my = _kernels.box_mean3d(y, window)
    vx = _kernels.box_mean3d(x * x, window) - mx * mx
    vy = _kernels.box_mean3d(y * y, window) - my * my
    cxy = _kernels.box_mean3d(x * y, window) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


# --------------------------------------------------------------------------
# F1 and probes
# --------------------------------------------------------------------------


def macro_f1(y_true: Sequence, y_pred: Sequence) -> float:
    """Unweighted mean per-class F1 over the union of observed classes."""
    y_true = list(y_true)
    y_pred = list(y_pred)
    if len(y_true) != len(y_pred):
        raise ValueError("y_true and y_pred differ in length")
    if not y_true:
        raise ValueError("macro_f1 of empty input")
    scores = []
    for c in sorted(set(y_true) | set(y_pred), key=str):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


DIAG_CLASSES = ("CN", "AD")


def knn_predict(train_z, train_y, test_z, k: int = 5, prefer: int = 0) -> np.ndarray:
    dist = _kernels.cosine_distances(np.asarray(test_z, np.float64), np.asarray(train_z, np.float64))
    return _kernels.knn_vote(dist, np.asarray(train_y), k, int(np.max(train_y)) + 1, prefer)


def diag_f1(train: LDRStore, test: LDRStore, k: int = 5) -> float:
    """CN-vs-AD macro-F1 of a cosine k-NN probe fitted on ``train``; MCI rows are ignored."""
    train = train.where_disease(DIAG_CLASSES)
    test = test.where_disease(DIAG_CLASSES)
    if len(test) == 0:
        raise ValueError("no CN/AD rows in the test set")
    missing = set(DIAG_CLASSES) - set(train.disease)
    if missing:
        raise ValueError(f"class {sorted(missing)} absent from probe training rows")
    code = {c: i for i, c in enumerate(DIAG_CLASSES)}
    ytr = np.array([code[d] for d in train.disease])
    pred = knn_predict(train.z, ytr, test.z, k=k, prefer=code["CN"])
    return macro_f1(test.disease, [DIAG_CLASSES[p] for p in pred])


def _stratified_patient_split(groups: Sequence[int], patients: Sequence[str], ratio: float, seed: int):
    """Split patients 80/20 within each group so every group lands on both sides."""
    rng = np.random.default_rng(seed)
    eval_ids = set()
    for g in sorted(set(groups)):
        pats = sorted({p for p, gg in zip(patients, groups) if gg == g})
        order = rng.permutation(len(pats))
        n_eval = max(1, len(pats) - int(round(ratio * len(pats))))
        eval_ids.update(pats[i] for i in order[:n_eval])
    is_eval = np.array([p in eval_ids for p in patients])
    return ~is_eval, is_eval


def fit_softmax_probe(x: np.ndarray, y: np.ndarray, n_classes: int, steps: int = 500, lr: float = 0.05,
                      l2: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch Adam on multinomial logistic regression, zero init."""
    n, d = x.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    m = [np.zeros_like(w), np.zeros_like(b)]
    v = [np.zeros_like(w), np.zeros_like(b)]
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, steps + 1):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        grads = [x.T @ g + l2 * w, g.sum(axis=0)]
        for i, (param, grad) in enumerate(zip((w, b), grads)):
            m[i] = b1 * m[i] + (1 - b1) * grad
            v[i] = b2 * v[i] + (1 - b2) * grad * grad
            param -= lr * (m[i] / (1 - b1**t)) / (np.sqrt(v[i] / (1 - b2**t)) + eps)
    return w, b


def domain_f1(ldrs: LDRStore, seed: int = 0, steps: int = 500, ratio: float = 0.8) -> float:
    """Macro-F1 of a fresh linear probe predicting domain from ``z``."""
    domains = sorted(set(ldrs.domain))
    if len(domains) < 2:
        raise ValueError("domain_f1 needs at least 2 domains")
    for d in domains:
        if ldrs.domain.count(d) < 10:
            raise ValueError(f"domain {d} has {ldrs.domain.count(d)} rows; domain_f1 needs at least 10 per domain")
    code = {d: i for i, d in enumerate(domains)}
    y = np.array([code[d] for d in ldrs.domain])
    tr, te = _stratified_patient_split(y, ldrs.patient_id, ratio, seed)
    z = ldrs.z.astype(np.float64)
    mu = z[tr].mean(axis=0)
    sd = z[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    x = (z - mu) / sd
    w, b = fit_softmax_probe(x[tr], y[tr], len(domains), steps=steps)
    pred = np.argmax(x[te] @ w + b, axis=1)
    return macro_f1(y[te].tolist(), pred.tolist())


# --------------------------------------------------------------------------
# D. clustering indices
# --------------------------------------------------------------------------


def _relabel(labels) -> tuple[np.ndarray, int]:
    _, inv = np.unique(np.asarray(labels), return_inverse=True)
    return inv.astype(np.int64), int(inv.max()) + 1 if len(inv) else 0


def contingency_table(labels_true, labels_pred) -> np.ndarray:
    a, na = _relabel(labels_true)
    b, nb = _relabel(labels_pred)
    if len(a) != len(b):
        raise ValueError("labelings differ in length")
    return _kernels.contingency(a, b, na, nb)


def _entropy(counts: np.ndarray) -> float:
    counts = counts[counts > 0].astype(np.float64)
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(-(p * np.log(p)).sum())


def mutual_info(table: np.ndarray) -> float:
    n = table.sum()
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    i, j = np.nonzero(table)
    nij = table[i, j].astype(np.float64)
    return float(np.sum(nij / n * (np.log(nij) + math.log(n) - np.log(a[i]) - np.log(b[j]))))


def expected_mutual_info(table: np.ndarray) -> float:
    """Expected MI under the permutation (hypergeometric) model."""
    n = int(table.sum())
    a = table.sum(axis=1).astype(np.int64)
    b = table.sum(axis=0).astype(np.int64)
    emi = 0.0
    lg_n = gammaln(n + 1)
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            log_p = (gammaln(ai + 1) + gammaln(bj + 1) + gammaln(n - ai + 1) + gammaln(n - bj + 1) - lg_n
                     - gammaln(nij + 1) - gammaln(ai - nij + 1) - gammaln(bj - nij + 1)
                     - gammaln(n - ai - bj + nij + 1))
            term = nij / n * (np.log(nij) + math.log(n) - math.log(ai) - math.log(bj))
            emi += float(np.sum(term * np.exp(log_p)))
    return emi


def homogeneity_completeness_v(labels_true, labels_pred) -> tuple[float, float, float]:
    table = contingency_table(labels_true, labels_pred)
    h_c = _entropy(table.sum(axis=1))
    h_k = _entropy(table.sum(axis=0))
    mi = mutual_info(table)
    hom = 1.0 if h_c == 0 else mi / h_c
    com = 1.0 if h_k == 0 else mi / h_k
    v = 0.0 if hom + com == 0 else 2 * hom * com / (hom + com)
    return hom, com, v


def adjusted_rand_index(labels_true, labels_pred) -> float:
    table = contingency_table(labels_true, labels_pred).astype(np.float64)
    n = table.sum()
    comb = lambda x: x * (x - 1) / 2  # noqa: E731
    sum_ij = comb(table).sum()
    sum_a = comb(table.sum(axis=1)).sum()
    sum_b = comb(table.sum(axis=0)).sum()
    if sum_ij == sum_a == sum_b:
        # identical pair structure, including the all-singletons and one-cluster cases
        return 1.0
    expected = sum_a * sum_b / comb(n)
    return float((sum_ij - expected) / (0.5 * (sum_a + sum_b) - expected))


def adjusted_mutual_info(labels_true, labels_pred) -> float:
    """AMI with arithmetic-mean normalisation."""
    table = contingency_table(labels_true, labels_pred)
    mi = mutual_info(table)
    emi = expected_mutual_info(table)
    norm = 0.5 * (_entropy(table.sum(axis=1)) + _entropy(table.sum(axis=0)))
    den = norm - emi
    if abs(den) < 1e-12:
        # every permutation attains the same MI; degenerate agreement
        return 1.0 if abs(mi - norm) < 1e-12 else 0.0
    return float((mi - emi) / den)


def silhouette(z: np.ndarray, labels) -> float:
    from sklearn.metrics import silhouette_score

    return float(silhouette_score(np.asarray(z, dtype=np.float64), np.asarray(labels)))


def kmeans_labels(z: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    from sklearn.cluster import KMeans

    km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(np.asarray(z, dtype=np.float64))
    return km.labels_


def clustering_indices(ldrs: LDRStore, cn_only: bool = True, seed: int = 0) -> dict[str, float]:
    """Six indices of how strongly the (CN) latent space is organised by domain."""
    if cn_only:
        ldrs = ldrs.where_disease(["CN"])
    domains = sorted(set(ldrs.domain))
    if len(domains) < 2:
        raise ValueError("clustering indices need at least 2 domains after filtering")
    y = np.asarray(ldrs.domain)
    assign = kmeans_labels(ldrs.z, len(domains), seed)
    hom, com, v = homogeneity_completeness_v(y, assign)
    return {
        "silhouette": silhouette(ldrs.z, y),
        "homogeneity": hom,
        "completeness": com,
        "v_measure": v,
        "ari": adjusted_rand_index(y, assign),
        "ami": adjusted_mutual_info(y, assign),
    }


def clustering_reduction(method: Mapping[str, float] | Sequence[float],
                         baseline: Mapping[str, float] | Sequence[float]) -> float:
    """Mean relative change (percent) vs the baseline; near-zero baselines skipped."""
    m = [method[k] for k in CLUSTER_INDICES] if isinstance(method, Mapping) else list(method)
    b = [baseline[k] for k in CLUSTER_INDICES] if isinstance(baseline, Mapping) else list(baseline)
    terms = [100.0 * (mi - bi) / abs(bi) for mi, bi in zip(m, b) if abs(bi) >= 1e-9]
    if not terms:
        raise ValueError("every baseline clustering index is ~0; reduction undefined")
    return float(np.mean(terms))


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

NO_RECONSTRUCTION = ("Noise", "ComBat")


@dataclass
class MetricsReport:
    method: str
    rmse_mean: float | None = None
    rmse_std: float | None = None
    ssim_mean: float | None = None
    ssim_std: float | None = None
    diag_f1_out: float | None = None
    diag_f1_in: float | None = None
    domain_f1: float | None = None
    clustering_reduction_percent: float | None = None
    clustering: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.rmse_mean is not None and self.rmse_mean < 0:
            raise ValueError("rmse must be non-negative")
        if self.ssim_mean is not None and not -1 <= self.ssim_mean <= 1:
            raise ValueError("ssim must lie in [-1, 1]")
        for name in ("diag_f1_out", "diag_f1_in", "domain_f1"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class MethodInputs:
    """Raw per-method material from which a report row is computed."""

    name: str
    ldr_train: LDRStore  # training-domain rows the probes fit on
    ldr_eval: LDRStore  # held-out patients of training domains
    ldr_test: LDRStore | None  # unseen-domain rows (None when the method cannot embed them)
    ldr_domain: LDRStore  # rows used for the domain probe
    ldr_cluster: LDRStore | None  # rows used for criterion D
    rmse: Sequence[float] | None = None
    ssim: Sequence[float] | None = None


@dataclass
class Report:
    rows: list[MetricsReport]
    num_domains: int
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"num_domains": self.num_domains, "notes": self.notes,
                           "rows": [asdict(r) for r in self.rows]}, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Report":
        d = json.loads(text)
        return cls([MetricsReport(**r) for r in d["rows"]], d["num_domains"], d.get("notes", []))

    def render(self) -> str:
        return render_table(self)


def _is_baseline(name: str) -> bool:
    return name.split()[0] in ("CAE", "3D-CAE")


def build_report(inputs: Sequence[MethodInputs], seed: int = 0) -> Report:
    """One row per method; the first CAE row is the clustering baseline."""
    base = next((m for m in inputs if _is_baseline(m.name)), None)
    if base is None:
        raise ValueError("report needs a CAE baseline row")
    if base.ldr_cluster is None:
        raise ValueError("baseline lacks clustering rows")
    base_idx = clustering_indices(base.ldr_cluster, seed=seed)
    rows = []
    for m in inputs:
        no_recon = any(m.name.startswith(p) for p in NO_RECONSTRUCTION)
        row = MetricsReport(m.name)
        if not no_recon and m.rmse is not None:
            row.rmse_mean, row.rmse_std = float(np.mean(m.rmse)), float(np.std(m.rmse))
            row.ssim_mean, row.ssim_std = float(np.mean(m.ssim)), float(np.std(m.ssim))
        row.diag_f1_in = diag_f1(m.ldr_train, m.ldr_eval)
        if m.ldr_test is not None and len(m.ldr_test):
            row.diag_f1_out = diag_f1(m.ldr_train, m.ldr_test)
        row.domain_f1 = domain_f1(m.ldr_domain, seed=seed)
        if m is base:
            row.clustering = dict(base_idx)
            row.clustering_reduction_percent = 0.0
        elif m.ldr_cluster is not None:
            row.clustering = clustering_indices(m.ldr_cluster, seed=seed)
            row.clustering_reduction_percent = clustering_reduction(row.clustering, base_idx)
        rows.append(row)
    k = len(set(base.ldr_domain.domain))
    return Report(rows, k)


def _fmt(v, spec):
    return "n/a" if v is None else format(v, spec)


def render_table(report: Report) -> str:
    """Aligned plain-text table with direction markers and footnotes."""
    head = ["", "RMSE ↓", "SSIM ↑", "Diag. F1 ↑ †", "Domain F1 ↓ ‡", "Clustering [%] ↓"]
    body = []
    for r in report.rows:
        rm = "n/a" if r.rmse_mean is None else f"{r.rmse_mean:.4f}±{r.rmse_std:.4f}"
        ss = "n/a" if r.ssim_mean is None else f"{r.ssim_mean:.3f}±{r.ssim_std:.3f}"
        dg = f"{_fmt(r.diag_f1_out, '.3f')} ({_fmt(r.diag_f1_in, '.3f')})"
        cl = "n/a" if r.clustering_reduction_percent is None else (
            "0" if r.clustering_reduction_percent == 0 else f"{r.clustering_reduction_percent:.2f}")
        name = r.method if _is_baseline(r.method) else f"+ {r.method}"
        body.append([name, rm, ss, dg, _fmt(r.domain_f1, ".3f"), cl])
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    line = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))  # noqa: E731
    rule = "-" * len(line(head))
    out = [f"Domain harmonization over {report.num_domains} domains", rule, line(head), rule]
    out += [line(row) for row in body]
    out += [rule,
            "† unseen-domain diagnosis; in parentheses, held-out patients of the training domains (8:2 split).",
            f"‡ a value close to 1/{report.num_domains} = {1 / report.num_domains:.3f} means the domain "
            "cannot be predicted from z."]
    out += report.notes
    return "\n".join(out) + "\n"
