"""Evaluation statistics and similarity-distribution analyses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import numerics as nx
from .encoders import ModelParams, encode_batch
from .errors import ConfigError, UndefinedAUCError
from .synth_data import SyntheticSample, stack_samples

MAX_REDRAWS = 100


# ----------------------------------------------------------------------------
# AUC and bootstrap


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return y.astype(bool)


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney U statistic; ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC is undefined when only one class is present")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class BootstrapResult:
    replicates: np.ndarray
    mean: float
    std: float
    seed: int


def bootstrap_auc(scores, labels, n_replicates: int = 1000, seed: int = 0) -> BootstrapResult:
    """Resample (score, label) pairs with replacement ``n_replicates`` times.

    Replicate ``r`` draws from its own generator seeded by ``(seed, r)``.
    A resample containing a single class is redrawn, up to 100 times.
    """
    if n_replicates < 1:
        raise ConfigError("n_replicates must be >= 1")
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    if y.all() or not y.any():
        raise UndefinedAUCError("AUC undefined: bootstrap needs both classes present in the data")
    n = s.size
    reps = np.empty(n_replicates)
    for r in range(n_replicates):
        rng = np.random.default_rng([seed, r])
        for _ in range(MAX_REDRAWS):
            idx = rng.integers(0, n, size=n)
            yr = y[idx]
            if yr.any() and not yr.all():
                break
        else:
            raise UndefinedAUCError(f"replicate {r}: no two-class resample in {MAX_REDRAWS} draws")
        reps[r] = auc(s[idx], yr)
    return BootstrapResult(reps, float(reps.mean()), float(reps.std()), seed)


# ----------------------------------------------------------------------------
# Welch t-test


def _betacf(a: float, b: float, x: float, max_iter: int = 10000, eps: float = 1e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


@dataclass
class ComparisonResult:
    name_a: str
    name_b: str
    mean_diff: float
    t: float
    p: float
    df: float
    winner: str

    def to_dict(self) -> dict:
        return {"model_a": self.name_a, "model_b": self.name_b, "mean_diff": self.mean_diff,
                "t": self.t, "p": self.p, "df": self.df, "winner": self.winner}


def t_test(rep_a, rep_b, name_a: str = "A", name_b: str = "B") -> ComparisonResult:
    """Welch's two-sample t-test for a difference of means."""
    a = np.asarray(rep_a, dtype=np.float64)
    b = np.asarray(rep_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ConfigError("t_test needs at least 2 values per sample")
    diff = float(a.mean() - b.mean())
    va, vb = float(a.var(ddof=1)) / a.size, float(b.var(ddof=1)) / b.size
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            t, p, df = 0.0, 1.0, float(a.size + b.size - 2)
        else:
            t, p, df = math.copysign(math.inf, diff), 0.0, float(a.size + b.size - 2)
    else:
        t = diff / math.sqrt(se2)
        df = se2 * se2 / (va * va / (a.size - 1) + vb * vb / (b.size - 1))
        p = float(student_t_two_sided_p(t, df))
    winner = name_a if diff > 0 else name_b if diff < 0 else "tie"
    return ComparisonResult(name_a, name_b, diff, t, p, df, winner)


# ----------------------------------------------------------------------------
# thresholded metrics


def confusion(predicted, truth) -> tuple[int, int, int, int]:
    p = _binary(predicted)
    y = _binary(truth)
    if p.shape != y.shape:
        raise ValueError("predicted and truth must have equal length")
    tp = int(np.sum(p & y))
    fp = int(np.sum(p & ~y))
    fn = int(np.sum(~p & y))
    tn = int(np.sum(~p & ~y))
    return tp, fp, fn, tn


def mcc_f1(predicted, truth) -> tuple[float, float]:
    tp, fp, fn, tn = confusion(predicted, truth)
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(denom) if denom else 0.0
    f1_denom = 2 * tp + fp + fn
    f1 = 2 * tp / f1_denom if f1_denom else 0.0
    return float(mcc), float(f1)


def threshold_candidates(scores) -> np.ndarray:
    """The minimum score (predict everything positive) plus midpoints of sorted unique scores."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    return np.concatenate([u[:1], (u[:-1] + u[1:]) / 2.0])


def threshold_select(scores, labels, objective: str = "mcc") -> float:
    """Threshold maximizing MCC or F1 for the rule ``score >= threshold``.

    Ties go to the lowest threshold.
    """
    if objective not in ("mcc", "f1"):
        raise ConfigError(f"unknown objective {objective!r}")
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    if y.all() or not y.any():
        raise UndefinedAUCError("AUC undefined: threshold selection needs both classes")
    which = 0 if objective == "mcc" else 1
    best_t, best_v = None, -math.inf
    for t in threshold_candidates(s):
        v = mcc_f1(s >= t, y)[which]
        if v > best_v:
            best_t, best_v = float(t), v
    return best_t


# ----------------------------------------------------------------------------
# similarity analyses on a trained model


@dataclass
class SimilarityCurve:
    raw_mean: np.ndarray
    raw_std: np.ndarray
    norm_mean: np.ndarray
    norm_std: np.ndarray
    per_image_raw: np.ndarray = field(repr=False)
    per_image_norm: np.ndarray = field(repr=False)


def _encoded_chunks(samples: list[SyntheticSample], params: ModelParams, chunk: int = 256):
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        pixels, tokens = stack_samples(part)
        yield part, encode_batch(pixels, tokens, params)


def similarity_curves_from(patch_e: np.ndarray, cls_e: np.ndarray) -> SimilarityCurve:
    """Curves from (n, P, d_e) patch embeddings and (n, d_e) [CLS] embeddings."""
    sims = np.einsum("npd,nd->np", patch_e, cls_e)
    raw = -np.sort(-sims, axis=1)
    norm = raw / raw.sum(axis=1, keepdims=True)
    return SimilarityCurve(raw.mean(axis=0), raw.std(axis=0), norm.mean(axis=0), norm.std(axis=0), raw, norm)


def similarity_curves(params: ModelParams, samples: list[SyntheticSample]) -> SimilarityCurve:
    """Sorted patch-to-[CLS] similarities of paired samples, raw and sum-normalized."""
    if not samples:
        raise ConfigError("similarity_curves needs a non-empty sample set")
    patch_parts, cls_parts = [], []
    for _, enc in _encoded_chunks(samples, params):
        patch_parts.append(enc.patch_e.data)
        cls_parts.append(enc.text_e.data)
    return similarity_curves_from(np.concatenate(patch_parts), np.concatenate(cls_parts))


def row_entropies(s: np.ndarray) -> np.ndarray:
    """Entropy of the softmax of every row of a (T, P) similarity matrix."""
    return nx.entropy(nx.softmax(s, axis=-1), axis=-1).data


def mean_row_entropy(params: ModelParams, samples: list[SyntheticSample]) -> float:
    """Mean over samples of the mean over non-pad token rows of softmax-row entropy."""
    if not samples:
        raise ConfigError("mean_row_entropy needs a non-empty sample set")
    per_sample = []
    for _, enc in _encoded_chunks(samples, params):
        s = np.matmul(enc.token_e.data, np.swapaxes(enc.patch_e.data, 1, 2))
        h = row_entropies(s)
        w = enc.mask.astype(np.float64)
        per_sample.append((h * w).sum(axis=1) / w.sum(axis=1))
    return float(np.concatenate(per_sample).mean())


def localization_hits(s: np.ndarray, alignment: np.ndarray, k: int) -> tuple[int, int]:
    """(hits, object tokens) for one (T, P) similarity matrix and its alignment mask."""
    hits = total = 0
    for row, patch in zip(*np.nonzero(alignment)):
        top = np.argsort(-s[row], kind="stable")[:k]
        hits += int(patch in top)
        total += 1
    return hits, total


def localization_hit_rate(params: ModelParams, samples: list[SyntheticSample], k: int = 3) -> float:
    """Fraction of object tokens whose true patch is among their top-k patches."""
    hits = total = 0
    for part, enc in _encoded_chunks(samples, params):
        s = np.matmul(enc.token_e.data, np.swapaxes(enc.patch_e.data, 1, 2))
        for i, sample in enumerate(part):
            h, t = localization_hits(s[i, :sample.length], sample.alignment, k)
            hits += h
            total += t
    if total == 0:
        raise ConfigError("no object tokens to localize")
    return hits / total
