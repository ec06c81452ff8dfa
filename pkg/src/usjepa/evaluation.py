"""Frozen-feature linear probes, macro-F1, few-shot curves and corruption sweeps."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import corruption as C
from .model import Encoder, pooled_features
from .numerics.optim import AdamW, OptimizerConfig
from .numerics.tensor import Parameter

log = logging.getLogger(__name__)

FEWSHOT_FRACTIONS = (0.01, 0.05, 0.10, 0.50, 1.0)
N_SEEDS = 5


@dataclass
class FeatureTable:
    matrix: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,)
    splits: np.ndarray  # (N,) of "train" / "val" / "test"
    backbone_id: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits)
        if not (len(self.matrix) == len(self.labels) == len(self.splits)):
            raise ValueError("feature, label and split counts differ")

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1


def extract_features(encoder: Encoder, frames: np.ndarray, labels, splits, batch: int = 64) -> FeatureTable:
    """Mean-pooled token features of a frozen encoder."""
    before = encoder.weights_hash()
    feats = pooled_features(encoder, frames, batch)
    if encoder.weights_hash() != before:
        raise RuntimeError("encoder weights changed during feature extraction")
    return FeatureTable(feats, labels, splits, before[:16])


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def macro_f1(pred, labels, n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no support and no predictions scores 0."""
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2TP + FP + FN
    f1 = np.divide(2 * tp, denom, out=np.zeros(n_classes), where=denom > 0)
    return float(f1.mean())


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 150
    patience: int = 15

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("invalid probe configuration")


@dataclass
class LinearProbe:
    weight: np.ndarray  # (D, K)
    bias: np.ndarray  # (K,)
    mean: np.ndarray
    scale: np.ndarray
    epochs_run: int = 0
    best_epoch: int = 0

    def logits(self, x: np.ndarray) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float64) - self.mean) / self.scale) @ self.weight + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(-_log_softmax(logits)[np.arange(len(y)), y].mean())


def train_probe(x_train, y_train, x_val, y_val, n_classes: int, cfg: ProbeConfig | None = None,
                seed: int = 0) -> LinearProbe:
    """Softmax regression with AdamW, cosine-annealed rate and early stopping on validation loss.

    Features are standardised with training-split statistics. The returned
    weights are those of the epoch with the lowest validation loss.
    """
    cfg = cfg or ProbeConfig()
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    missing = set(range(n_classes)) - set(np.unique(y_train).tolist())
    if missing:
        raise ValueError(f"classes {sorted(missing)} have no training samples")
    mean = x_train.mean(axis=0)
    scale = x_train.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    xs = (x_train - mean) / scale
    xv = (np.asarray(x_val, dtype=np.float64) - mean) / scale
    y_val = np.asarray(y_val, dtype=np.int64)

    rng = np.random.default_rng([seed, 17])
    d = xs.shape[1]
    w = Parameter(rng.normal(0.0, 0.01, size=(d, n_classes)), name="probe.weight")
    b = Parameter(np.zeros(n_classes), decay=False, name="probe.bias")
    opt = AdamW([w, b], OptimizerConfig(base_lr=cfg.lr, start_lr=cfg.lr, final_lr=0.0, warmup_epochs=0,
                                        total_epochs=cfg.max_epochs))
    onehot = np.eye(n_classes)[y_train]

    best = (math.inf, w.data.copy(), b.data.copy(), 0)
    stale = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = 0.5 * cfg.lr * (1.0 + math.cos(math.pi * (epoch - 1) / cfg.max_epochs))
        order = rng.permutation(len(xs))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            xb = xs[idx]
            p = np.exp(_log_softmax(xb @ w.data + b.data))
            g = (p - onehot[idx]) / len(idx)
            w.grad = xb.T @ g
            b.grad = g.sum(axis=0)
            opt.step(lr, cfg.weight_decay)
        val_loss = cross_entropy(xv @ w.data + b.data, y_val) if len(xv) else 0.0
        if val_loss < best[0]:
            best = (val_loss, w.data.copy(), b.data.copy(), epoch)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return LinearProbe(best[1], best[2], mean, scale, epochs_run=epoch, best_epoch=best[3])


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class ProbeReport:
    task: str
    scores: list[float]
    seeds: list[int]
    fraction: float = 1.0
    corruption: str = "none"
    severity: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        return float(np.std(self.scores, ddof=1)) if len(self.scores) > 1 else 0.0


def probe_table(table: FeatureTable, seed: int, cfg: ProbeConfig | None = None,
                train_idx: np.ndarray | None = None) -> tuple[float, LinearProbe]:
    """Train on ``train_idx`` (default: the train split), early-stop on val, score on test."""
    tr = table.indices("train") if train_idx is None else np.asarray(train_idx)
    va, te = table.indices("val"), table.indices("test")
    k = table.n_classes
    probe = train_probe(table.matrix[tr], table.labels[tr], table.matrix[va], table.labels[va], k, cfg, seed)
    return macro_f1(probe.predict(table.matrix[te]), table.labels[te], k), probe


def linear_probe_report(table: FeatureTable, seeds=range(N_SEEDS), cfg: ProbeConfig | None = None,
                        task: str = "synthetic") -> ProbeReport:
    seeds = list(seeds)
    return ProbeReport(task, [probe_table(table, s, cfg)[0] for s in seeds], seeds)


def stratified_subsample(labels: np.ndarray, idx: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Per class, round(fraction * n_k) members (at least one), returned in ascending order."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    idx = np.asarray(idx)
    if fraction == 1.0:
        return np.sort(idx)
    rng = np.random.default_rng([seed, 23, int(round(fraction * 1e6))])
    out = []
    for k in np.unique(labels[idx]):
        members = idx[labels[idx] == k]
        n = int(math.floor(fraction * len(members) + 0.5))
        n = max(n, 1)
        out.append(rng.choice(members, size=n, replace=False))
    return np.sort(np.concatenate(out))


def fewshot_curve(table: FeatureTable, fractions=FEWSHOT_FRACTIONS, seeds=range(N_SEEDS),
                  cfg: ProbeConfig | None = None, task: str = "synthetic") -> list[ProbeReport]:
    seeds = list(seeds)
    train = table.indices("train")
    reports = []
    for f in fractions:
        scores, sizes = [], []
        for s in seeds:
            sub = stratified_subsample(table.labels, train, f, s)
            if len(np.unique(table.labels[sub])) < table.n_classes:
                log.warning("fraction %g leaves a class without samples; skipped", f)
                break
            scores.append(probe_table(table, s, cfg, sub)[0])
            sizes.append(len(sub))
        else:
            reports.append(ProbeReport(task, scores, seeds, fraction=f, extra={"n_train": sizes}))
    return reports


def robustness_sweep(encoder: Encoder, frames: np.ndarray, regions: np.ndarray, labels, splits,
                     kinds=C.KINDS, severities=(0,) + C.SEVERITIES, seeds=range(N_SEEDS),
                     cfg: ProbeConfig | None = None, task: str = "synthetic") -> list[ProbeReport]:
    """Probes trained on clean features, scored on corrupted test frames.

    Blur and contrast are deterministic, so their test features are shared
    across seeds; speckle is redrawn per seed.
    """
    seeds = list(seeds)
    clean = extract_features(encoder, frames, labels, splits)
    probes = {s: probe_table(clean, s, cfg)[1] for s in seeds}
    te = clean.indices("test")
    y = clean.labels[te]
    k = clean.n_classes
    reports = []
    for kind in kinds:
        for eps in severities:
            cache = None
            scores = []
            for s in seeds:
                if cache is None or kind == "speckle":
                    corrupted = C.corrupt(frames[te], regions[te], kind, eps, seed=s)
                    cache = pooled_features(encoder, corrupted)
                scores.append(macro_f1(probes[s].predict(cache), y, k))
            reports.append(ProbeReport(task, scores, seeds, corruption=kind, severity=eps))
    return reports


def paired_trend_test(scores: np.ndarray, alpha: float = 0.05) -> tuple[bool, list[float]]:
    """Check that scores (seeds x severities) do not increase with severity.

    For each consecutive severity pair a one-sided paired t-test asks whether
    the mean change is significantly positive. Returns (passed, p-values).
    """
    scores = np.asarray(scores, dtype=np.float64)
    pvals = []
    for j in range(scores.shape[1] - 1):
        d = scores[:, j + 1] - scores[:, j]
        m = d.mean()
        sd = d.std(ddof=1) if len(d) > 1 else 0.0
        if sd == 0.0:
            p = 0.0 if m > 0 else 1.0
        else:
            p = float(stats.t.sf(m / (sd / math.sqrt(len(d))), df=len(d) - 1))
        pvals.append(p)
    return all(p >= alpha for p in pvals), pvals


def write_csv(reports: list[ProbeReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["task", "seed", "fraction", "corruption", "severity", "macro_f1"])
        for r in reports:
            for s, v in zip(r.seeds, r.scores):
                wr.writerow([r.task, s, r.fraction, r.corruption, r.severity, repr(float(v))])
    return path


def read_csv(path) -> list[ProbeReport]:
    groups: dict[tuple, ProbeReport] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["task"], float(row["fraction"]), row["corruption"], int(row["severity"]))
            rep = groups.setdefault(key, ProbeReport(key[0], [], [], key[1], key[2], key[3]))
            rep.seeds.append(int(row["seed"]))
            rep.scores.append(float(row["macro_f1"]))
    return list(groups.values())


def markdown_summary(reports: list[ProbeReport]) -> str:
    """Table with one row per task and condition, macro-F1 as mean ± std over seeds."""
    lines = ["| task | fraction | corruption | severity | seeds | macro-F1 |",
             "|---|---|---|---|---|---|"]
    for r in reports:
        lines.append(f"| {r.task} | {r.fraction:g} | {r.corruption} | {r.severity} | {len(r.scores)} | "
                     f"{100 * r.mean:.2f} ± {100 * r.std:.2f} |")
    return "\n".join(lines) + "\n"
