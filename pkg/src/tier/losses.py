"""CLIP contrastive loss plus the token/patch entropy penalties.

For one image-caption pair the similarity matrix ``S`` is T x P (token rows,
patch columns). The patch penalty is the mean entropy of the row-wise
softmax of ``S`` (how spread each token is over patches); the token penalty
is the mean entropy of the column-wise softmax (how spread each patch is
over tokens). Neither softmax uses the CLIP temperature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoders import EncodedBatch
from .errors import ConfigError, ContractError
from .numerics import Tensor

UNIT_TOL = 1e-9


@dataclass(frozen=True)
class TierConfig:
    lambda_p: float = 0.0
    lambda_t: float = 0.0
    # "sample": mean within each sample, then across the batch.
    # "flat": one mean over every row/column in the batch.
    penalty_average: str = "sample"
    cls_in_penalty: bool = True
    # False drops the penalty terms from the loss sum entirely (they are
    # still evaluated for logging, but nothing flows back from them).
    penalty_terms: bool = True

    def __post_init__(self):
        if not (self.lambda_p >= 0 and self.lambda_t >= 0):
            raise ConfigError(f"penalty weights must be non-negative, got {self.lambda_p}, {self.lambda_t}")
        if self.penalty_average not in ("sample", "flat"):
            raise ConfigError(f"unknown penalty_average {self.penalty_average!r}")


@dataclass
class LossBreakdown:
    clip_loss: Tensor
    patch_penalty: Tensor
    token_penalty: Tensor
    total: Tensor

    def to_dict(self) -> dict[str, float]:
        return {
            "clip": self.clip_loss.item(),
            "patch_pen": self.patch_penalty.item(),
            "token_pen": self.token_penalty.item(),
            "total": self.total.item(),
        }


def _check_unit_rows(x: Tensor, what: str) -> None:
    norms = np.linalg.norm(x.data, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ContractError(f"{what} rows must be unit-norm")


def similarity_matrix(token_e, patch_e) -> Tensor:
    """S[i, j] = token_e[i] . patch_e[j]; batched over a leading axis if present."""
    token_e, patch_e = nx.as_tensor(token_e), nx.as_tensor(patch_e)
    _check_unit_rows(token_e, "token embedding")
    _check_unit_rows(patch_e, "patch embedding")
    return nx.matmul(token_e, nx.swapaxes(patch_e, -1, -2))


def _check_nonempty(s: Tensor) -> None:
    if s.ndim != 2 or 0 in s.shape:
        raise ContractError(f"similarity matrix must be a non-empty 2-D array, got shape {s.shape}")


def patch_entropy_penalty(s) -> Tensor:
    """Mean over token rows of the entropy of softmax(row)."""
    s = nx.as_tensor(s)
    _check_nonempty(s)
    return nx.mean(nx.entropy(nx.softmax(s, axis=1), axis=1))


def token_entropy_penalty(s) -> Tensor:
    """Mean over patch columns of the entropy of softmax(column)."""
    s = nx.as_tensor(s)
    _check_nonempty(s)
    return nx.mean(nx.entropy(nx.softmax(s, axis=0), axis=0))


def clip_loss(image_e, text_e, log_temp) -> Tensor:
    """Symmetric cross-entropy over exp(log_temp)-scaled cosine logits."""
    image_e, text_e = nx.as_tensor(image_e), nx.as_tensor(text_e)
    n = image_e.shape[0]
    if n < 2:
        raise ContractError("clip_loss needs at least 2 pairs")
    logits = nx.matmul(image_e, nx.transpose(text_e)) * nx.exp(log_temp)
    labels = np.arange(n)
    loss_i = nx.cross_entropy(logits, labels, axis=0)
    loss_t = nx.cross_entropy(logits, labels, axis=1)
    return (loss_i + loss_t) * 0.5


def penalty_row_mask(mask: np.ndarray, cls_in_penalty: bool) -> np.ndarray:
    rows = np.array(mask, dtype=bool, copy=True)
    if not cls_in_penalty:
        rows[:, 0] = False
    if not rows.any(axis=1).all():
        raise ContractError("a caption has no tokens left for the penalty")
    return rows


def batch_penalties(s: Tensor, rows: np.ndarray, average: str = "sample") -> tuple[Tensor, Tensor]:
    """Patch and token penalties for a padded (n, L, P) similarity tensor.

    ``rows[i, t]`` selects the token rows that take part in sample ``i``.
    """
    n, length, n_patch = s.shape
    weight = rows.astype(np.float64)
    counts = weight.sum(axis=1)

    row_h = nx.entropy(nx.softmax(s, axis=2), axis=2)  # (n, L)
    masked = row_h * nx.Tensor(weight)
    if average == "sample":
        patch_pen = nx.mean(nx.sum(masked, axis=1) / nx.Tensor(counts))
    else:
        patch_pen = nx.sum(masked) / float(counts.sum())

    col_h = nx.entropy(nx.softmax(s, axis=1, mask=rows[:, :, None]), axis=1)  # (n, P)
    token_pen = nx.mean(col_h)
    return patch_pen, token_pen


def tier_loss(batch: EncodedBatch, config: TierConfig, log_temp) -> LossBreakdown:
    """CLIP loss plus weighted penalties for a padded batch of pairs."""
    if len(batch) < 2:
        raise ContractError("tier_loss needs a batch of at least 2 pairs")
    clip = clip_loss(batch.image_e, batch.text_e, log_temp)
    s = similarity_matrix(batch.token_e, batch.patch_e)
    rows = penalty_row_mask(batch.mask, config.cls_in_penalty)
    patch_pen, token_pen = batch_penalties(s, rows, config.penalty_average)
    if config.penalty_terms:
        total = clip + patch_pen * config.lambda_p + token_pen * config.lambda_t
    else:
        total = clip
    return LossBreakdown(clip, patch_pen, token_pen, total)
