"""Zero-shot classification with averaged positive/negative queries.

A label's queries are encoded through the text encoder; their projected
[CLS] embeddings are averaged and renormalized into one positive and one
negative direction. An image's score is its similarity to the positive
direction minus its similarity to the negative one, which lies in [-2, 2].
Applying the same score to each patch embedding gives a heatmap.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .encoders import CLS, PAD, ModelParams, encode_image_batch, encode_text_batch
from .errors import ConfigError, DegenerateQueryError, UndefinedAUCError
from .metrics import auc
from .synth_data import ClassCatalog, SyntheticSample, stack_samples

GRAY = 128


@dataclass
class QuerySet:
    label: str
    positive: list[list[int]]
    negative: list[list[int]]
    q_pos: np.ndarray  # (d_e,) unit norm
    q_neg: np.ndarray


def _pad(seqs: list[list[int]], max_len: int) -> np.ndarray:
    out = np.full((len(seqs), max_len), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        if len(s) > max_len:
            raise ConfigError(f"query of length {len(s)} exceeds max_len {max_len}")
        out[i, :len(s)] = s
    return out


def cls_embeddings(seqs: list[list[int]], params: ModelParams) -> np.ndarray:
    """Projected [CLS] embeddings (n, d_e) of token sequences."""
    token_e, _ = encode_text_batch(_pad(seqs, params.dims.max_len), params)
    return token_e.data[:, 0]


def mean_direction(embeddings: np.ndarray, eps: float = nx.NORM_EPS) -> np.ndarray:
    """Average the rows and renormalize to unit length."""
    m = np.mean(np.asarray(embeddings, dtype=np.float64), axis=0)
    norm = np.linalg.norm(m)
    if norm < eps:
        raise DegenerateQueryError("query embeddings cancel out; mean has (near) zero norm")
    return m / norm


def build_query_set(label: str, positive: list[list[int]], negative: list[list[int]],
                    params: ModelParams) -> QuerySet:
    if not positive or not negative:
        raise ConfigError(f"label {label!r} needs at least one positive and one negative query")
    q_pos = mean_direction(cls_embeddings(positive, params))
    q_neg = mean_direction(cls_embeddings(negative, params))
    return QuerySet(label, [list(q) for q in positive], [list(q) for q in negative], q_pos, q_neg)


def zero_shot_score(image_e, qs: QuerySet) -> np.ndarray:
    """Positive minus negative similarity; works on one embedding or a stack."""
    e = np.asarray(image_e, dtype=np.float64)
    # unit vectors can dot to 1 + 2**-52, so clamp to the exact range
    return np.clip(e @ qs.q_pos - e @ qs.q_neg, -2.0, 2.0)


def zero_shot_probability(image_e, qs: QuerySet) -> np.ndarray:
    """Two-way softmax over (positive, negative) similarities.

    Equals sigmoid(score), so it ranks images exactly like the score.
    """
    z = zero_shot_score(image_e, qs)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ----------------------------------------------------------------------------
# registry


def default_registry(catalog: ClassCatalog) -> dict[str, dict[str, list[list[int]]]]:
    """Queries over the synthetic vocabulary.

    The positive query for a class is its name token, alone and followed by
    each of the first three fillers. The negatives are the other classes'
    single-token queries, the analogue of using other findings as the
    "nothing of interest here" prompt.
    """
    registry = {}
    for name, tok in zip(catalog.names, catalog.token_ids):
        positive = [[CLS, tok]] + [[CLS, tok, f] for f in catalog.filler_ids[:3]]
        negative = [[CLS, other] for other in catalog.token_ids if other != tok]
        registry[name] = {"positive": positive, "negative": negative}
    return registry


def save_registry(registry: dict, path) -> None:
    Path(path).write_text(json.dumps(registry, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_registry(path) -> dict[str, dict[str, list[list[int]]]]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read query registry {path}: {exc}") from exc
    for label, entry in raw.items():
        if not entry.get("positive") or not entry.get("negative"):
            raise ConfigError(f"{path}: label {label!r} needs 'positive' and 'negative' query lists")
    return raw


def build_query_sets(registry: dict, params: ModelParams) -> dict[str, QuerySet]:
    return {label: build_query_set(label, e["positive"], e["negative"], params) for label, e in registry.items()}


# ----------------------------------------------------------------------------
# batch scoring


def image_embeddings(samples: list[SyntheticSample], params: ModelParams,
                     chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """(patch_e (n, P, d_e), image_e (n, d_e)) for a list of samples."""
    patch_parts, image_parts = [], []
    for i in range(0, len(samples), chunk):
        pixels, _ = stack_samples(samples[i:i + chunk])
        patch_e, image_e = encode_image_batch(pixels, params)
        patch_parts.append(patch_e.data)
        image_parts.append(image_e.data)
    d = params.dims
    if not samples:
        return np.zeros((0, d.n_patches, d.d_embed)), np.zeros((0, d.d_embed))
    return np.concatenate(patch_parts), np.concatenate(image_parts)


def score_samples(samples: list[SyntheticSample], query_sets: dict[str, QuerySet],
                  params: ModelParams) -> dict[str, np.ndarray]:
    _, image_e = image_embeddings(samples, params)
    return {label: zero_shot_score(image_e, qs) for label, qs in query_sets.items()}


def truth_for(samples: list[SyntheticSample], catalog: ClassCatalog, label: str) -> np.ndarray:
    c = catalog.index(label)
    return np.array([int(s.labels[c]) for s in samples], dtype=np.int64)


# ----------------------------------------------------------------------------
# heatmaps


@dataclass
class Heatmap:
    label: str
    source: str
    scores: np.ndarray  # (K, K)


def patch_scores(patch_e: np.ndarray, qs: QuerySet, grid: int) -> np.ndarray:
    return zero_shot_score(patch_e, qs).reshape(grid, grid)


def heatmap(pixels: np.ndarray, qs: QuerySet, params: ModelParams, source: str = "") -> Heatmap:
    patch_e, _ = encode_image_batch(np.asarray(pixels)[None], params)
    return Heatmap(qs.label, source, patch_scores(patch_e.data[0], qs, params.dims.grid))


def diverging_rgb(scores: np.ndarray) -> np.ndarray:
    """Map scores to RGB bytes: gray at 0, red for positive, blue for negative.

    The colour scale is symmetric around 0 and set by the largest magnitude.
    """
    scores = np.asarray(scores, dtype=np.float64)
    scale = np.max(np.abs(scores)) if scores.size else 0.0
    v = scores / scale if scale > 0 else np.zeros_like(scores)
    pos, neg = np.clip(v, 0, 1), np.clip(-v, 0, 1)
    r = GRAY + (255 - GRAY) * pos - GRAY * neg
    g = GRAY - GRAY * np.abs(v)
    b = GRAY + (255 - GRAY) * neg - GRAY * pos
    return np.rint(np.stack([r, g, b], axis=-1)).astype(np.uint8)


def render_ppm(hm: Heatmap, patch: int) -> bytes:
    """Binary PPM with each cell expanded to a patch x patch block."""
    rgb = diverging_rgb(hm.scores)
    img = np.repeat(np.repeat(rgb, patch, axis=0), patch, axis=1)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_heatmap(hm: Heatmap, out_dir, patch: int, stem: str = "heatmap") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ppm, csv_path = out_dir / f"{stem}.ppm", out_dir / f"{stem}.csv"
    ppm.write_bytes(render_ppm(hm, patch))
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "score"])
        for (r, c), v in np.ndenumerate(hm.scores):
            w.writerow([r, c, repr(float(v))])
    return ppm, csv_path


def read_heatmap_csv(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    k = max(int(r["row"]) for r in rows) + 1
    out = np.zeros((k, k))
    for r in rows:
        out[int(r["row"]), int(r["col"])] = float(r["score"])
    return out


def zero_shot_aucs(params: ModelParams, samples: list[SyntheticSample], catalog: ClassCatalog,
                   registry: dict | None = None) -> dict[str, float]:
    """AUC per label; labels with a single class in ``samples`` are left out."""
    registry = default_registry(catalog) if registry is None else registry
    scores = score_samples(samples, build_query_sets(registry, params), params)
    out = {}
    for label, s in scores.items():
        y = truth_for(samples, catalog, label)
        if y.any() and not y.all():
            out[label] = auc(s, y)
    return out


def mean_zero_shot_auc(params: ModelParams, samples: list[SyntheticSample], catalog: ClassCatalog,
                       registry: dict | None = None) -> float:
    aucs = zero_shot_aucs(params, samples, catalog, registry)
    if not aucs:
        raise UndefinedAUCError("no label has both classes in the evaluation split")
    return float(np.mean(list(aucs.values())))
