"""Synthetic image-caption pairs with known token-to-patch alignment.

Each image is a K x K grid of s x s patches filled with Gaussian background
noise. One to four objects of distinct classes are stamped into distinct
patches, each class drawing its own fixed binary tile. The caption is
``[CLS]`` followed by the object-name tokens and up to three filler tokens
in shuffled order, padded to the maximum length.

Sample ``i`` of a dataset is drawn from its own generator seeded with
``(seed, i)``, so datasets can be generated in any order or in parallel
and still come out bit-identical.

Dataset container layout (all integers little-endian)::

    magic      8 bytes  b"TIERDATA"
    version    u32
    manifest   u32 length, UTF-8 JSON, u32 CRC32 of the JSON bytes
    records    fixed-size, one per sample in id order:
               u32 sample id | u8 split code | f32[H*W*C] pixels |
               u16[L] tokens | packbits(L*P alignment) | packbits(C labels) |
               u32 CRC32 of everything before it in the record
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import CLS, PAD, ModelDims
from .errors import ConfigError, IntegrityError, VersionError

MAGIC = b"TIERDATA"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
DEFAULT_COUNTS = {"train": 4096, "val": 512, "test": 512}
NOISE_SIGMA = 0.1
MAX_OBJECTS = 4
MAX_FILLERS = 3

CLASS_NAMES = (
    "blob", "ring", "cross", "bar", "dot", "grid",
    "wave", "arc", "spike", "knot", "star", "wedge",
)
N_FILLERS = 20
CATALOG_SEED = 20240611


@dataclass(frozen=True)
class ClassCatalog:
    names: tuple[str, ...]
    token_ids: tuple[int, ...]
    tiles: np.ndarray  # (C, s, s) float32 in {0, 1}
    filler_ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "token_ids": list(self.token_ids),
            "tiles": ["".join(str(int(b)) for b in t.reshape(-1)) for t in self.tiles],
            "filler_ids": list(self.filler_ids),
        }

    @classmethod
    def from_dict(cls, d: dict, patch: int) -> "ClassCatalog":
        tiles = np.array([[int(c) for c in t] for t in d["tiles"]], dtype=np.float32)
        return cls(
            tuple(d["names"]), tuple(d["token_ids"]), tiles.reshape(-1, patch, patch), tuple(d["filler_ids"])
        )


def make_catalog(n_classes: int = len(CLASS_NAMES), dims: ModelDims | None = None,
                 n_fillers: int = N_FILLERS, min_distance: int | None = None) -> ClassCatalog:
    """Build the object vocabulary with pairwise well-separated binary tiles.

    Object tokens take ids 2..C+1 and fillers the next ``n_fillers`` ids.
    """
    dims = dims or ModelDims()
    s = dims.patch
    if not 1 <= n_classes <= len(CLASS_NAMES):
        raise ConfigError(f"n_classes must be in [1, {len(CLASS_NAMES)}]")
    if 2 + n_classes + n_fillers > dims.vocab:
        raise ConfigError("vocabulary too small for the catalog")
    min_distance = s * s // 4 if min_distance is None else min_distance
    rng = np.random.default_rng(CATALOG_SEED)
    tiles: list[np.ndarray] = []
    while len(tiles) < n_classes:
        t = (rng.random(s * s) < 0.5).astype(np.float32)
        if all(np.sum(t != u) >= min_distance for u in tiles):
            tiles.append(t)
    token_ids = tuple(range(2, 2 + n_classes))
    filler_ids = tuple(range(2 + n_classes, 2 + n_classes + n_fillers))
    return ClassCatalog(CLASS_NAMES[:n_classes], token_ids, np.stack(tiles).reshape(-1, s, s), filler_ids)


@dataclass
class SyntheticSample:
    sample_id: int
    split: str
    pixels: np.ndarray  # (K*s, K*s, 1) float32
    tokens: np.ndarray  # (L,) int64, [CLS] first, PAD-filled
    alignment: np.ndarray  # (T, P) uint8, T = non-pad length
    labels: np.ndarray  # (C,) uint8 multi-hot

    @property
    def length(self) -> int:
        return int(np.sum(self.tokens != PAD))

    def objects(self) -> list[tuple[int, int]]:
        """(token position, patch index) for every object token."""
        rows, cols = np.nonzero(self.alignment)
        return list(zip(rows.tolist(), cols.tolist()))

    def equals(self, other: "SyntheticSample") -> bool:
        return (
            self.sample_id == other.sample_id
            and self.split == other.split
            and np.array_equal(self.pixels, other.pixels)
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.alignment, other.alignment)
            and np.array_equal(self.labels, other.labels)
        )


def generate_sample(rng: np.random.Generator, catalog: ClassCatalog, dims: ModelDims | None = None,
                    objects: list[tuple[str, int]] | None = None, n_objects: int | None = None,
                    sample_id: int = 0, split: str = "train", sigma: float = NOISE_SIGMA) -> SyntheticSample:
    """Draw one sample. ``objects`` pins (class name, patch index) placements."""
    dims = dims or ModelDims()
    if len(catalog) == 0:
        raise ConfigError("empty class catalog")
    k, s, n_patch = dims.grid, dims.patch, dims.n_patches
    if objects is None:
        m = int(rng.integers(1, MAX_OBJECTS + 1)) if n_objects is None else n_objects
        if m > len(catalog):
            raise ConfigError(f"cannot place {m} distinct classes from a catalog of {len(catalog)}")
        classes = rng.choice(len(catalog), size=m, replace=False)
        patches = rng.choice(n_patch, size=m, replace=False)
    else:
        if len(objects) > len(catalog):
            raise ConfigError(f"cannot place {len(objects)} distinct classes from a catalog of {len(catalog)}")
        classes = np.array([catalog.index(name) for name, _ in objects], dtype=np.int64)
        patches = np.array([p for _, p in objects], dtype=np.int64)
        if len(set(classes.tolist())) != len(classes) or len(set(patches.tolist())) != len(patches):
            raise ConfigError("objects must have distinct classes and distinct patches")

    pixels = (rng.standard_normal((k * s, k * s, dims.channels)) * sigma).astype(np.float32)
    for c, p in zip(classes, patches):
        r, col = divmod(int(p), k)
        pixels[r * s:(r + 1) * s, col * s:(col + 1) * s, :] += catalog.tiles[c][:, :, None]

    n_fill = int(rng.integers(0, MAX_FILLERS + 1))
    fillers = rng.choice(catalog.filler_ids, size=n_fill, replace=True) if n_fill else np.zeros(0, np.int64)
    # body entries: (token id, patch or -1)
    body = [(catalog.token_ids[c], int(p)) for c, p in zip(classes, patches)]
    body += [(int(f), -1) for f in fillers]
    order = rng.permutation(len(body))
    body = [body[i] for i in order]
    length = 1 + len(body)
    if length > dims.max_len:
        raise ConfigError("caption longer than max_len")

    tokens = np.full(dims.max_len, PAD, dtype=np.int64)
    tokens[0] = CLS
    alignment = np.zeros((length, n_patch), dtype=np.uint8)
    for pos, (tok, patch) in enumerate(body, start=1):
        tokens[pos] = tok
        if patch >= 0:
            alignment[pos, patch] = 1
    labels = np.zeros(len(catalog), dtype=np.uint8)
    labels[classes] = 1
    return SyntheticSample(sample_id, split, pixels, tokens, alignment, labels)


@dataclass
class DatasetManifest:
    seed: int
    counts: dict[str, int]
    catalog: ClassCatalog
    dims: ModelDims = field(default_factory=ModelDims)
    sigma: float = NOISE_SIGMA
    version: int = FORMAT_VERSION

    @property
    def total(self) -> int:
        return sum(self.counts[s] for s in SPLITS)

    def split_of(self, sample_id: int) -> str:
        start = 0
        for s in SPLITS:
            if sample_id < start + self.counts[s]:
                return s
            start += self.counts[s]
        raise IndexError(sample_id)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "counts": {s: self.counts[s] for s in SPLITS},
            "sigma": self.sigma,
            "dims": self.dims.to_dict(),
            "catalog": self.catalog.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        dims = ModelDims.from_dict(d["dims"])
        return cls(d["seed"], dict(d["counts"]), ClassCatalog.from_dict(d["catalog"], dims.patch),
                   dims, d["sigma"], d["version"])


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    samples: list[SyntheticSample]

    def split(self, name: str) -> list[SyntheticSample]:
        return [s for s in self.samples if s.split == name]

    @property
    def catalog(self) -> ClassCatalog:
        return self.manifest.catalog


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_dataset(seed: int = 0, counts: dict[str, int] | None = None, n_classes: int = len(CLASS_NAMES),
                     dims: ModelDims | None = None, sigma: float = NOISE_SIGMA) -> SyntheticDataset:
    dims = dims or ModelDims()
    counts = dict(DEFAULT_COUNTS if counts is None else counts)
    for s in SPLITS:
        counts.setdefault(s, 0)
        if counts[s] < 0:
            raise ConfigError(f"negative count for split {s}")
    catalog = make_catalog(n_classes, dims)
    manifest = DatasetManifest(seed, counts, catalog, dims, sigma)
    samples = [
        generate_sample(sample_rng(seed, i), catalog, dims, sample_id=i, split=manifest.split_of(i), sigma=sigma)
        for i in range(manifest.total)
    ]
    return SyntheticDataset(manifest, samples)


def stack_samples(samples: list[SyntheticSample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays (pixels (n, H, W, C) float64, tokens (n, L))."""
    pixels = np.stack([s.pixels for s in samples]).astype(np.float64)
    tokens = np.stack([s.tokens for s in samples])
    return pixels, tokens


# ----------------------------------------------------------------------------
# container I/O

_SPLIT_CODE = {s: i for i, s in enumerate(SPLITS)}


def _record_size(dims: ModelDims, n_classes: int) -> int:
    n_px = dims.image_size * dims.image_size * dims.channels
    mask_bytes = (dims.max_len * dims.n_patches + 7) // 8
    label_bytes = (n_classes + 7) // 8
    return 4 + 1 + 4 * n_px + 2 * dims.max_len + mask_bytes + label_bytes + 4


def _encode_record(sample: SyntheticSample, dims: ModelDims) -> bytes:
    full_mask = np.zeros((dims.max_len, dims.n_patches), dtype=np.uint8)
    full_mask[: sample.alignment.shape[0]] = sample.alignment
    body = b"".join((
        struct.pack("<IB", sample.sample_id, _SPLIT_CODE[sample.split]),
        np.asarray(sample.pixels, dtype="<f4").tobytes(),
        np.asarray(sample.tokens, dtype="<u2").tobytes(),
        np.packbits(full_mask.reshape(-1)).tobytes(),
        np.packbits(sample.labels.astype(np.uint8)).tobytes(),
    ))
    return body + struct.pack("<I", zlib.crc32(body))


def _decode_record(buf: bytes, index: int, manifest: DatasetManifest) -> SyntheticSample:
    dims = manifest.dims
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError(f"checksum mismatch in record {index}", record_index=index)
    sample_id, code = struct.unpack_from("<IB", body, 0)
    off = 5
    n_px = dims.image_size * dims.image_size * dims.channels
    pixels = np.frombuffer(body, dtype="<f4", count=n_px, offset=off).astype(np.float32)
    off += 4 * n_px
    tokens = np.frombuffer(body, dtype="<u2", count=dims.max_len, offset=off).astype(np.int64)
    off += 2 * dims.max_len
    n_mask = dims.max_len * dims.n_patches
    mask_bytes = (n_mask + 7) // 8
    mask = np.unpackbits(np.frombuffer(body, dtype=np.uint8, count=mask_bytes, offset=off))[:n_mask]
    off += mask_bytes
    n_cls = len(manifest.catalog)
    labels = np.unpackbits(np.frombuffer(body, dtype=np.uint8, offset=off))[:n_cls]
    if sample_id != index or code >= len(SPLITS):
        raise IntegrityError(f"malformed header in record {index}", record_index=index)
    length = int(np.sum(tokens != PAD))
    return SyntheticSample(
        sample_id,
        SPLITS[code],
        pixels.reshape(dims.image_size, dims.image_size, dims.channels),
        tokens,
        mask.reshape(dims.max_len, dims.n_patches)[:length].copy(),
        labels.copy(),
    )


def dataset_to_bytes(dataset: SyntheticDataset) -> bytes:
    m = dataset.manifest
    manifest_json = json.dumps(m.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", m.version), struct.pack("<I", len(manifest_json)), manifest_json,
             struct.pack("<I", zlib.crc32(manifest_json))]
    parts += [_encode_record(s, m.dims) for s in dataset.samples]
    return b"".join(parts)


def write_dataset(dataset: SyntheticDataset, path) -> None:
    if len(dataset.samples) != dataset.manifest.total:
        raise ConfigError("sample count does not match the manifest")
    Path(path).write_bytes(dataset_to_bytes(dataset))


def dataset_from_bytes(data: bytes) -> SyntheticDataset:
    if len(data) < 16 or data[:8] != MAGIC:
        raise IntegrityError("not a dataset container (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported dataset format version {version}")
    (n_json,) = struct.unpack_from("<I", data, 12)
    start = 16 + n_json + 4
    if len(data) < start:
        raise IntegrityError("truncated manifest")
    raw = data[16:16 + n_json]
    (crc,) = struct.unpack_from("<I", data, 16 + n_json)
    if zlib.crc32(raw) != crc:
        raise IntegrityError("manifest checksum mismatch")
    manifest = DatasetManifest.from_dict(json.loads(raw.decode("utf-8")))
    size = _record_size(manifest.dims, len(manifest.catalog))
    samples = []
    for i in range(manifest.total):
        rec = data[start + i * size:start + (i + 1) * size]
        if len(rec) != size:
            raise IntegrityError(f"file truncated inside record {i}", record_index=i)
        samples.append(_decode_record(rec, i, manifest))
    if len(data) != start + manifest.total * size:
        raise IntegrityError("trailing bytes after the last record")
    return SyntheticDataset(manifest, samples)


def read_dataset(path) -> SyntheticDataset:
    return dataset_from_bytes(Path(path).read_bytes())


def manifest_summary(manifest: DatasetManifest) -> str:
    d = manifest.dims
    counts = ", ".join(f"{s}={manifest.counts[s]}" for s in SPLITS)
    return (f"format v{manifest.version} seed={manifest.seed} {counts} classes={len(manifest.catalog)} "
            f"image={d.image_size}x{d.image_size}x{d.channels} grid={d.grid}x{d.grid} max_len={d.max_len}")

