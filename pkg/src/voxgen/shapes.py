"""Procedural voxel shapes, resolution pairing, IoU, and voxel/mesh file I/O.

Eight parametric solid families with continuous per-sample variation stand in
for a scanned shape corpus. Occupancy is decided by an analytic inside test
evaluated at voxel centers, so a given spec always voxelizes to the same grid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import DimensionError, FormatError, ValidationError

CATEGORIES = ("box", "sphere", "cylinder", "cone", "torus", "lbeam", "table", "chair")

# Normalized parameter ranges (fractions of the cube side). Extents stay
# below 0.84 so every shape keeps at least one empty boundary voxel at
# resolutions >= 16.
PARAM_RANGES: Dict[str, Dict[str, Tuple[float, float]]] = {
    "box": {"ex": (0.3, 0.8), "ey": (0.3, 0.8), "ez": (0.3, 0.8)},
    "sphere": {"radius": (0.15, 0.42)},
    "cylinder": {"radius": (0.15, 0.33), "height": (0.4, 0.84)},
    "cone": {"radius": (0.2, 0.4), "height": (0.5, 0.84)},
    "torus": {"major": (0.22, 0.3), "minor": (0.06, 0.12)},
    "lbeam": {"length": (0.55, 0.84), "thickness": (0.16, 0.3)},
    "table": {
        "width": (0.55, 0.8),
        "height": (0.55, 0.8),
        "top": (0.08, 0.14),
        "leg": (0.1, 0.18),
    },
    "chair": {
        "width": (0.4, 0.6),
        "height": (0.6, 0.84),
        "seat": (0.08, 0.12),
        "leg": (0.1, 0.16),
        "back": (0.08, 0.14),
    },
}


@dataclass
class VoxelGrid:
    """Dense cubic occupancy grid with values in [0, 1], axes ordered x, y, z."""

    resolution: int
    occupancy: np.ndarray

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=np.float32)
        r = self.resolution
        if occ.shape != (r, r, r):
            raise DimensionError(f"occupancy shape {occ.shape} != ({r}, {r}, {r})")
        if occ.size and (occ.min() < 0.0 or occ.max() > 1.0):
            raise ValidationError(
                f"occupancy values outside [0,1]: min={occ.min()}, max={occ.max()}"
            )
        self.occupancy = occ

    @property
    def is_binary(self) -> bool:
        occ = self.occupancy
        return bool(np.all((occ == 0.0) | (occ == 1.0)))

    def binarize(self, threshold: float = 0.5) -> "VoxelGrid":
        return VoxelGrid(self.resolution, (self.occupancy > threshold).astype(np.float32))

    def count(self, threshold: float = 0.5) -> int:
        return int((self.occupancy > threshold).sum())

    def digest(self, threshold: float = 0.5) -> bytes:
        """Stable byte fingerprint of the binarized grid."""
        return (self.occupancy > threshold).astype(np.uint8).tobytes()


@dataclass
class ShapeSpec:
    category: str
    params: Dict[str, float]
    seed: int = 0

    def validate(self):
        if self.category not in PARAM_RANGES:
            raise ValidationError(f"unknown category {self.category!r}; known: {CATEGORIES}")
        ranges = PARAM_RANGES[self.category]
        for name, (lo, hi) in ranges.items():
            if name not in self.params:
                raise ValidationError(f"{self.category}: missing parameter {name!r}")
            v = self.params[name]
            if not (lo <= v <= hi):
                raise ValidationError(
                    f"{self.category}.{name}={v} outside [{lo}, {hi}]"
                )
        extra = set(self.params) - set(ranges)
        if extra:
            raise ValidationError(f"{self.category}: unknown parameters {sorted(extra)}")


@dataclass
class DatasetConfig:
    fine_resolution: int = 32
    coarse_resolution: int = 16
    samples_per_category: int = 200
    split_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.fine_resolution != 2 * self.coarse_resolution:
            raise ValidationError(
                f"fine resolution must be twice the coarse resolution; "
                f"got {self.fine_resolution} vs {self.coarse_resolution}"
            )
        if not (0.0 < self.split_fraction < 1.0):
            raise ValidationError(f"split fraction {self.split_fraction} outside (0,1)")


@dataclass
class Sample:
    fine: VoxelGrid
    coarse: VoxelGrid
    category: str
    category_index: int
    sample_id: str


@dataclass
class Dataset:
    train: List[Sample]
    test: List[Sample]
    config: DatasetConfig


def sample_spec(category: str, rng: np.random.Generator, seed: int = 0) -> ShapeSpec:
    """Draw per-category parameters uniformly from their documented ranges."""
    if category not in PARAM_RANGES:
        raise ValidationError(f"unknown category {category!r}; known: {CATEGORIES}")
    params = {
        name: float(lo + (hi - lo) * rng.random())
        for name, (lo, hi) in PARAM_RANGES[category].items()
    }
    return ShapeSpec(category, params, seed=seed)


def _inside(category: str, p: Dict[str, float], x, y, z) -> np.ndarray:
    if category == "box":
        return (np.abs(x) < p["ex"] / 2) & (np.abs(y) < p["ey"] / 2) & (np.abs(z) < p["ez"] / 2)
    if category == "sphere":
        return x * x + y * y + z * z < p["radius"] ** 2
    if category == "cylinder":
        return (x * x + y * y < p["radius"] ** 2) & (np.abs(z) < p["height"] / 2)
    if category == "cone":
        h = p["height"]
        frac = (h / 2 - z) / h  # 1 at the base, 0 at the apex
        rad = p["radius"] * np.clip(frac, 0.0, 1.0)
        return (np.abs(z) < h / 2) & (x * x + y * y < rad * rad)
    if category == "torus":
        ring = np.sqrt(x * x + y * y) - p["major"]
        return ring * ring + z * z < p["minor"] ** 2
    if category == "lbeam":
        L, t = p["length"], p["thickness"]
        upright = (x > -L / 2) & (x < -L / 2 + t) & (np.abs(y) < L / 2) & (np.abs(z) < t / 2)
        foot = (np.abs(x) < L / 2) & (y > -L / 2) & (y < -L / 2 + t) & (np.abs(z) < t / 2)
        return upright | foot
    if category == "table":
        w, h, tt, lt = p["width"], p["height"], p["top"], p["leg"]
        top = (np.abs(x) < w / 2) & (np.abs(y) < w / 2) & (z > h / 2 - tt) & (z < h / 2)
        off = w / 2 - lt / 2
        legs = (
            (np.abs(np.abs(x) - off) < lt / 2)
            & (np.abs(np.abs(y) - off) < lt / 2)
            & (z > -h / 2)
            & (z < h / 2 - tt)
        )
        return top | legs
    if category == "chair":
        w, h, st, lt, bt = p["width"], p["height"], p["seat"], p["leg"], p["back"]
        leg_top = -h / 2 + 0.45 * h
        seat = (np.abs(x) < w / 2) & (np.abs(y) < w / 2) & (z > leg_top) & (z < leg_top + st)
        off = w / 2 - lt / 2
        legs = (
            (np.abs(np.abs(x) - off) < lt / 2)
            & (np.abs(np.abs(y) - off) < lt / 2)
            & (z > -h / 2)
            & (z < leg_top)
        )
        back = (
            (np.abs(x) < w / 2)
            & (y > w / 2 - bt)
            & (y < w / 2)
            & (z > leg_top + st)
            & (z < h / 2)
        )
        return seat | legs | back
    raise ValidationError(f"unknown category {category!r}")


def generate_primitive(spec: ShapeSpec, resolution: int) -> VoxelGrid:
    """Voxelize the parametric solid by testing voxel centers."""
    if resolution < 8:
        raise ValidationError(f"resolution {resolution} < 8")
    spec.validate()
    centers = (np.arange(resolution, dtype=np.float64) + 0.5) / resolution - 0.5
    x, y, z = np.meshgrid(centers, centers, centers, indexing="ij")
    occ = _inside(spec.category, spec.params, x, y, z)
    return VoxelGrid(resolution, occ.astype(np.float32))


def pool_downsample(grid: VoxelGrid, factor: int) -> VoxelGrid:
    """Max-pool over factor^3 blocks; a block is occupied if any member is."""
    r = grid.resolution
    if factor < 1 or r % factor != 0:
        raise ValidationError(f"factor {factor} does not divide resolution {r}")
    if factor == 1:
        return VoxelGrid(r, grid.occupancy.copy())
    ro = r // factor
    pooled = grid.occupancy.reshape(ro, factor, ro, factor, ro, factor).max(axis=(1, 3, 5))
    return VoxelGrid(ro, pooled)


def build_dataset(cfg: DatasetConfig) -> Dataset:
    """Generate the category-balanced paired-resolution dataset.

    Coarse grids are pooled from the fine grids, so the two resolutions are
    consistent by construction. The train/test split is a per-category seeded
    shuffle, which keeps the split exactly balanced.
    """
    factor = cfg.fine_resolution // cfg.coarse_resolution
    train: List[Sample] = []
    test: List[Sample] = []
    for ci, category in enumerate(CATEGORIES):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, ci))))
        samples = []
        for i in range(cfg.samples_per_category):
            spec = sample_spec(category, rng, seed=cfg.seed)
            fine = generate_primitive(spec, cfg.fine_resolution)
            coarse = pool_downsample(fine, factor)
            samples.append(Sample(fine, coarse, category, ci, f"{category}_{i:04d}"))
        order = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, ci, 1)))).permutation(
            cfg.samples_per_category
        )
        n_train = int(round(cfg.samples_per_category * cfg.split_fraction))
        train.extend(samples[j] for j in order[:n_train])
        test.extend(samples[j] for j in order[n_train:])
    return Dataset(train=train, test=test, config=cfg)


def iou(a: VoxelGrid, b: VoxelGrid, threshold: float = 0.5) -> float:
    """Intersection over union of the binarized grids; 1.0 when both empty."""
    if a.resolution != b.resolution:
        raise DimensionError(
            f"resolution mismatch: {a.resolution} vs {b.resolution}"
        )
    am = a.occupancy > threshold
    bm = b.occupancy > threshold
    union = int(np.logical_or(am, bm).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(am, bm).sum())
    return inter / union


# -- VOXL binary format ------------------------------------------------------
#
# magic "VOXL" | version u8=1 | resolution u16 LE | reserved u8=0 |
# res^3 payload bytes, 0 or 255, x varying fastest.

VOXL_MAGIC = b"VOXL"
VOXL_VERSION = 1
_VOXL_HEADER = struct.Struct("<4sBHB")


def voxl_write(grid: VoxelGrid, path) -> None:
    if not grid.is_binary:
        raise ValidationError("VOXL stores binary grids; binarize() before writing")
    if grid.resolution > 0xFFFF:
        raise ValidationError(f"resolution {grid.resolution} exceeds the u16 field")
    header = _VOXL_HEADER.pack(VOXL_MAGIC, VOXL_VERSION, grid.resolution, 0)
    # x fastest: flatten with z slowest
    payload = (grid.occupancy.transpose(2, 1, 0) > 0.5).astype(np.uint8) * np.uint8(255)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def voxl_read(path) -> VoxelGrid:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _VOXL_HEADER.size:
        raise FormatError(f"truncated header: {len(blob)} bytes < {_VOXL_HEADER.size} at offset 0")
    magic, version, resolution, _reserved = _VOXL_HEADER.unpack_from(blob, 0)
    if magic != VOXL_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != VOXL_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    expected = resolution**3
    payload = blob[_VOXL_HEADER.size :]
    if len(payload) < expected:
        raise FormatError(
            f"truncated payload: {len(payload)} bytes < {expected} at offset {_VOXL_HEADER.size}"
        )
    if len(payload) > expected:
        raise FormatError(
            f"trailing bytes: {len(payload) - expected} extra at offset {_VOXL_HEADER.size + expected}"
        )
    flat = np.frombuffer(payload, dtype=np.uint8)
    bad = ~np.isin(flat, (0, 255))
    if bad.any():
        off = _VOXL_HEADER.size + int(np.argmax(bad))
        raise FormatError(f"invalid voxel byte at offset {off}")
    occ = (flat.reshape(resolution, resolution, resolution) == 255).transpose(2, 1, 0)
    return VoxelGrid(resolution, occ.astype(np.float32))


# -- OBJ export ---------------------------------------------------------------

# Faces keyed by axis/direction; each entry lists the 4 cube corners of the
# face, wound counter-clockwise when viewed from outside.
_FACES = {
    (0, +1): ((1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)),
    (0, -1): ((0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)),
    (1, +1): ((0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)),
    (1, -1): ((0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)),
    (2, +1): ((0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)),
    (2, -1): ((0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)),
}


def export_obj(grid: VoxelGrid, threshold: float = 0.5) -> str:
    """One unit cube per occupied voxel, shared interior faces culled."""
    if not (0.0 < threshold < 1.0):
        raise ValidationError(f"threshold {threshold} outside (0,1)")
    occ = grid.occupancy > threshold
    verts: Dict[Tuple[int, int, int], int] = {}
    vlines: List[str] = []
    flines: List[str] = []

    def vid(corner: Tuple[int, int, int]) -> int:
        i = verts.get(corner)
        if i is None:
            i = len(verts) + 1
            verts[corner] = i
            vlines.append(f"v {corner[0]} {corner[1]} {corner[2]}")
        return i

    r = grid.resolution
    for x, y, z in np.argwhere(occ):
        for (axis, sign), corners in _FACES.items():
            n = [x, y, z]
            n[axis] += sign
            if 0 <= n[axis] < r and occ[n[0], n[1], n[2]]:
                continue
            ids = [vid((int(x) + c[0], int(y) + c[1], int(z) + c[2])) for c in corners]
            flines.append(f"f {ids[0]} {ids[1]} {ids[2]}")
            flines.append(f"f {ids[0]} {ids[2]} {ids[3]}")
    return "\n".join(vlines + flines) + ("\n" if vlines or flines else "")
