"""Toy dual encoders: a patch-grid image encoder and a token-level text encoder.

Images go through a linear per-patch projection, text through a token +
position embedding and one tanh mixing layer. Both end in a one-hidden-layer
MLP projection head into a shared, unit-norm joint space. The image side is
strictly local: patch ``j``'s embedding is a function of the pixels of patch
``j`` alone. The global image embedding is the renormalized mean of the
normalized patch embeddings; the global text embedding is the [CLS] row.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError, DomainError
from .numerics import Tape, Tensor

CLS = 0
PAD = 1
INIT_TEMPERATURE = 0.07


@dataclass(frozen=True)
class ModelDims:
    grid: int = 7  # K: patches per side
    patch: int = 8  # s: pixels per patch side
    channels: int = 1
    d_image: int = 32
    d_text: int = 32
    hidden: int = 64
    d_embed: int = 16
    vocab: int = 64
    max_len: int = 16

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def image_size(self) -> int:
        return self.grid * self.patch

    @property
    def patch_pixels(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDims":
        return cls(**d)


@dataclass
class ImageEncoderParams:
    patch_w: np.ndarray  # (s*s*c, d_i)
    patch_b: np.ndarray
    head_w1: np.ndarray  # (d_i, h)
    head_b1: np.ndarray
    head_w2: np.ndarray  # (h, d_e)
    head_b2: np.ndarray


@dataclass
class TextEncoderParams:
    token_emb: np.ndarray  # (V, d_t)
    pos_emb: np.ndarray  # (L, d_t)
    mix_w: np.ndarray  # (d_t, d_t)
    mix_b: np.ndarray
    head_w1: np.ndarray
    head_b1: np.ndarray
    head_w2: np.ndarray
    head_b2: np.ndarray


@dataclass
class ModelParams:
    """All learnable state. Fields hold arrays, or Tensors once bound to a tape."""

    image: ImageEncoderParams
    text: TextEncoderParams
    log_temp: np.ndarray  # 0-d; logits are scaled by exp(log_temp)
    dims: ModelDims = field(default_factory=ModelDims)

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, group in (("image", self.image), ("text", self.text)):
            for f in fields(group):
                out[f"{prefix}.{f.name}"] = getattr(group, f.name)
        out["log_temp"] = self.log_temp
        return out

    @classmethod
    def from_named(cls, named: dict, dims: ModelDims) -> "ModelParams":
        img = {f.name: named[f"image.{f.name}"] for f in fields(ImageEncoderParams)}
        txt = {f.name: named[f"text.{f.name}"] for f in fields(TextEncoderParams)}
        return cls(ImageEncoderParams(**img), TextEncoderParams(**txt), named["log_temp"], dims)

    def map(self, fn) -> "ModelParams":
        """Apply ``fn(name, value)`` to every parameter, returning a new instance."""
        return ModelParams.from_named({k: fn(k, v) for k, v in self.named().items()}, self.dims)

    def bind(self, tape: Tape) -> "ModelParams":
        return self.map(lambda name, v: tape.leaf(v, name=name))

    def copy(self) -> "ModelParams":
        return self.map(lambda _, v: np.array(v, dtype=np.float64, copy=True))

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return param_shapes(self.dims)


def param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    d = dims
    return {
        "image.patch_w": (d.patch_pixels, d.d_image),
        "image.patch_b": (d.d_image,),
        "image.head_w1": (d.d_image, d.hidden),
        "image.head_b1": (d.hidden,),
        "image.head_w2": (d.hidden, d.d_embed),
        "image.head_b2": (d.d_embed,),
        "text.token_emb": (d.vocab, d.d_text),
        "text.pos_emb": (d.max_len, d.d_text),
        "text.mix_w": (d.d_text, d.d_text),
        "text.mix_b": (d.d_text,),
        "text.head_w1": (d.d_text, d.hidden),
        "text.head_b1": (d.hidden,),
        "text.head_w2": (d.hidden, d.d_embed),
        "text.head_b2": (d.d_embed,),
        "log_temp": (),
    }


def init_params(seed: int, dims: ModelDims | None = None) -> ModelParams:
    """Seed-deterministic initialization.

    Weights and biases are uniform on +-1/sqrt(fan_in). Lookup tables have a
    one-hot input, so their fan-in is 1. The log-temperature starts at
    log(1/0.07).
    """
    dims = dims or ModelDims()
    rng = np.random.default_rng(seed)
    shapes = param_shapes(dims)
    named = {}
    for name, shape in shapes.items():
        if name == "log_temp":
            named[name] = np.array(math.log(1.0 / INIT_TEMPERATURE))
            continue
        if name.endswith("_emb"):
            fan_in = 1
        elif len(shape) == 2:
            fan_in = shape[0]
        else:
            fan_in = shapes[name.replace("_b", "_w")][0]
        bound = 1.0 / math.sqrt(fan_in)
        named[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams.from_named(named, dims)


@dataclass
class EncodedPair:
    patch_e: Tensor  # (P, d_e)
    token_e: Tensor  # (T, d_e), [CLS] at row 0, pads dropped
    image_e: Tensor  # (d_e,)
    text_e: Tensor  # (d_e,)


@dataclass
class EncodedBatch:
    """Padded batch encoding; ``mask[i, t]`` is False at pad positions."""

    patch_e: Tensor  # (n, P, d_e)
    token_e: Tensor  # (n, L, d_e)
    image_e: Tensor  # (n, d_e)
    text_e: Tensor  # (n, d_e)
    mask: np.ndarray  # (n, L) bool

    def __len__(self) -> int:
        return self.mask.shape[0]

    def pair(self, i: int) -> EncodedPair:
        t = int(self.mask[i].sum())
        return EncodedPair(
            self.patch_e[i], self.token_e[i, :t], self.image_e[i], self.text_e[i]
        )


def image_to_patches(pixels: np.ndarray, dims: ModelDims) -> np.ndarray:
    """(n, K*s, K*s, c) -> (n, K*K, s*s*c), patches in row-major grid order."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 3:
        px = px[None]
    k, s, c = dims.grid, dims.patch, dims.channels
    if px.ndim != 4 or px.shape[1:] != (k * s, k * s, c):
        raise DimensionError(f"expected images of shape {(k * s, k * s, c)}, got {px.shape[1:]}")
    n = px.shape[0]
    px = px.reshape(n, k, s, k, s, c).transpose(0, 1, 3, 2, 4, 5)
    return px.reshape(n, k * k, s * s * c)


def _mlp_head(x, w1, b1, w2, b2) -> Tensor:
    return nx.tanh(x @ w1 + b1) @ w2 + b2


def encode_image_batch(pixels: np.ndarray, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Return (patch_e (n, P, d_e), image_e (n, d_e))."""
    p = params.image
    patches = nx.Tensor(image_to_patches(pixels, params.dims))
    feats = patches @ p.patch_w + p.patch_b
    patch_e = nx.l2_normalize(_mlp_head(feats, p.head_w1, p.head_b1, p.head_w2, p.head_b2), axis=-1)
    image_e = nx.l2_normalize(nx.mean(patch_e, axis=1), axis=-1)
    return patch_e, image_e


def encode_image(pixels: np.ndarray, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Single image: (patch_e (P, d_e), image_e (d_e,))."""
    patch_e, image_e = encode_image_batch(np.asarray(pixels)[None], params)
    return patch_e[0], image_e[0]


def validate_tokens(tokens: np.ndarray, dims: ModelDims) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.shape[1] == 0 or np.any(tokens[:, 0] != CLS):
        raise ContractError("every token sequence must start with [CLS]")
    if np.any(tokens < 0) or np.any(tokens >= dims.vocab):
        raise DomainError(f"token index outside vocabulary of size {dims.vocab}")
    if tokens.shape[1] > dims.max_len:
        raise DimensionError(f"sequence length {tokens.shape[1]} exceeds max_len {dims.max_len}")
    return tokens.astype(np.int64)


def encode_text_batch(tokens: np.ndarray, params: ModelParams) -> tuple[Tensor, np.ndarray]:
    """Return (token_e (n, L, d_e), mask (n, L)).

    Each token is embedded (token + position), mixed with the masked mean
    of its caption through one tanh layer, then projected. Pad rows are
    still computed but carry ``mask == False``.
    """
    tokens = validate_tokens(tokens, params.dims)
    t = params.text
    n, length = tokens.shape
    mask = tokens != PAD
    x = nx.take(t.token_emb, tokens) + t.pos_emb[:length]
    m = nx.Tensor(mask[:, :, None].astype(np.float64))
    context = nx.sum(x * m, axis=1, keepdims=True) / nx.Tensor(m.data.sum(axis=1, keepdims=True))
    h = nx.tanh((x + context) @ t.mix_w + t.mix_b)
    token_e = nx.l2_normalize(_mlp_head(h, t.head_w1, t.head_b1, t.head_w2, t.head_b2), axis=-1)
    return token_e, mask


def encode_text(tokens, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Single caption: (token_e (T, d_e) with pads dropped, [CLS] embedding)."""
    token_e, mask = encode_text_batch(np.asarray(tokens)[None], params)
    t = int(mask[0].sum())
    rows = token_e[0, np.flatnonzero(mask[0])] if t < mask.shape[1] else token_e[0]
    return rows, rows[0]


def encode_batch(pixels: np.ndarray, tokens: np.ndarray, params: ModelParams) -> EncodedBatch:
    patch_e, image_e = encode_image_batch(pixels, params)
    token_e, mask = encode_text_batch(tokens, params)
    return EncodedBatch(patch_e, token_e, image_e, token_e[:, 0], mask)
