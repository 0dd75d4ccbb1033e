"""Conditioning embeddings: synthetic provider, noise perturbation, file loader.

The synthetic provider emulates a joint text/image embedding space: every
category owns a unit concept vector, and each modality adds its own fixed
offset direction. The angle between the two offset directions (the "gap
angle") controls how far the text-side query sits from the image-side
training cloud, so transfer from image-conditioned training to text-prompted
inference is a real, tunable difficulty.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import FormatError, ValidationError
from .shapes import CATEGORIES


@dataclass
class Embedding:
    values: np.ndarray
    modality: str  # "image" | "text"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 1:
            raise ValidationError(f"embedding must be a vector, got shape {self.values.shape}")
        if self.modality not in ("image", "text"):
            raise ValidationError(f"modality must be image or text, got {self.modality!r}")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass
class ProviderConfig:
    dim: int = 32
    gap_angle: float = 0.35  # radians between image and text offset directions
    view_noise: float = 0.1
    offset_scale: float = 2.0  # relative weight of the shared modality offset
    views_per_category: int = 16
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.gap_angle <= np.pi / 2):
            raise ValidationError(f"gap angle {self.gap_angle} outside [0, pi/2]")
        if self.dim < 3:
            raise ValidationError(f"embedding dim {self.dim} too small")


@dataclass
class NoiseConfig:
    gamma: float = 1.2

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValidationError(f"gamma must be finite and >= 0, got {self.gamma}")


def _normalize(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v.astype(np.float64)))
    if n == 0.0:
        raise ValidationError("cannot normalize a zero vector")
    return (v / n).astype(np.float32)


class SyntheticProvider:
    """Deterministic stand-in for a pretrained joint text/image encoder."""

    def __init__(self, cfg: ProviderConfig):
        self.cfg = cfg
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 0xC0))))
        concepts = rng.normal(size=(len(CATEGORIES), cfg.dim))
        self.concepts = np.stack([_normalize(c) for c in concepts])
        # Two offset directions separated by exactly gap_angle, orthogonal to
        # nothing in particular; built from an orthonormal pair.
        a = _normalize(rng.normal(size=cfg.dim))
        b = rng.normal(size=cfg.dim)
        b = _normalize(b - np.dot(b, a) * a)
        self.image_offset = (self.cfg.offset_scale * a).astype(np.float32)
        text_dir = np.cos(cfg.gap_angle) * a + np.sin(cfg.gap_angle) * b
        self.text_offset = (self.cfg.offset_scale * text_dir).astype(np.float32)

    def _category_index(self, category: str) -> int:
        try:
            return CATEGORIES.index(category)
        except ValueError:
            raise ValidationError(
                f"unknown category {category!r}; known: {CATEGORIES}"
            ) from None

    def image_embed(self, category: str, view: int, sample_seed: int = 0) -> Embedding:
        """Embedding of one rendered view; deterministic in all arguments."""
        ci = self._category_index(category)
        if view < 0:
            raise ValidationError(f"view index must be >= 0, got {view}")
        base = self.concepts[ci] + self.image_offset
        if self.cfg.view_noise > 0.0:
            rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence((self.cfg.seed, ci, view, sample_seed)))
            )
            base = base + self.cfg.view_noise * rng.normal(size=self.cfg.dim)
        return Embedding(_normalize(base), "image")

    def text_embed(self, category: str) -> Embedding:
        """Prompt-side embedding; no view noise, no RNG consumed."""
        ci = self._category_index(category)
        return Embedding(_normalize(self.concepts[ci] + self.text_offset), "text")


def synthetic_image_embed(cfg: ProviderConfig, category: str, view: int, sample_seed: int = 0) -> Embedding:
    return SyntheticProvider(cfg).image_embed(category, view, sample_seed)


def synthetic_text_embed(cfg: ProviderConfig, category: str) -> Embedding:
    return SyntheticProvider(cfg).text_embed(category)


def perturb_embedding(e: Embedding, noise: NoiseConfig, rng: np.random.Generator) -> Embedding:
    """Add scaled isotropic noise, then re-normalize.

    Before re-normalization the displacement norm is exactly
    gamma * ||e||, independent of the noise draw.
    """
    if noise.gamma < 0:
        raise ValidationError(f"gamma must be >= 0, got {noise.gamma}")
    if noise.gamma == 0.0:
        return Embedding(e.values.copy(), e.modality)
    eps = rng.normal(size=e.dim)
    eps = eps / np.linalg.norm(eps)
    scale = noise.gamma * float(np.linalg.norm(e.values.astype(np.float64)))
    perturbed = e.values + (scale * eps).astype(np.float32)
    return Embedding(_normalize(perturbed), e.modality)


# -- EMBD binary format --------------------------------------------------------
#
# magic "EMBD" | version u8=1 | D u16 LE | count u32 LE | records, each:
# id length u8 | id bytes | tag u8 (0 image, 1 text) | D float32 LE.

EMBD_MAGIC = b"EMBD"
EMBD_VERSION = 1
_EMBD_HEADER = struct.Struct("<4sBHI")
_TAGS = {0: "image", 1: "text"}
_TAG_CODES = {v: k for k, v in _TAGS.items()}


def embd_write(records: List[Tuple[str, Embedding]], path) -> None:
    if not records:
        dim = 0
    else:
        dim = records[0][1].dim
    seen = set()
    with open(path, "wb") as fh:
        fh.write(_EMBD_HEADER.pack(EMBD_MAGIC, EMBD_VERSION, dim, len(records)))
        for rid, emb in records:
            if emb.dim != dim:
                raise ValidationError(f"record {rid!r} has dim {emb.dim}, header says {dim}")
            if rid in seen:
                raise ValidationError(f"duplicate record id {rid!r}")
            seen.add(rid)
            rid_b = rid.encode("utf-8")
            if len(rid_b) > 255:
                raise ValidationError(f"record id {rid!r} longer than 255 bytes")
            fh.write(struct.pack("<B", len(rid_b)))
            fh.write(rid_b)
            fh.write(struct.pack("<B", _TAG_CODES[emb.modality]))
            fh.write(emb.values.astype("<f4").tobytes())


def load_embedding_file(path) -> List[Tuple[str, Embedding]]:
    """Read EMBD records in file order; ids must be unique, dims consistent."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _EMBD_HEADER.size:
        raise FormatError(f"truncated header: {len(blob)} bytes at offset 0")
    magic, version, dim, count = _EMBD_HEADER.unpack_from(blob, 0)
    if magic != EMBD_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != EMBD_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    off = _EMBD_HEADER.size
    out: List[Tuple[str, Embedding]] = []
    seen = set()
    for i in range(count):
        if off + 1 > len(blob):
            raise FormatError(f"record {i}: truncated id length at offset {off}")
        (id_len,) = struct.unpack_from("<B", blob, off)
        off += 1
        if off + id_len + 1 > len(blob):
            raise FormatError(f"record {i}: truncated id/tag at offset {off}")
        rid = blob[off : off + id_len].decode("utf-8")
        off += id_len
        (tag,) = struct.unpack_from("<B", blob, off)
        off += 1
        if tag not in _TAGS:
            raise FormatError(f"record {i}: unknown tag {tag} at offset {off - 1}")
        need = dim * 4
        if off + need > len(blob):
            raise FormatError(f"record {i}: dim mismatch or truncation at offset {off}")
        values = np.frombuffer(blob[off : off + need], dtype="<f4").copy()
        off += need
        if rid in seen:
            raise FormatError(f"record {i}: duplicate id {rid!r}")
        seen.add(rid)
        out.append((rid, Embedding(values, _TAGS[tag])))
    if off != len(blob):
        raise FormatError(f"trailing bytes: {len(blob) - off} extra at offset {off}")
    return out
