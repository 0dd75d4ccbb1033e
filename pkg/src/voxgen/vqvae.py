"""Stage-1 discrete autoencoders: voxel grids <-> latent token grids.

Two independent instances are trained, one per resolution (coarse and fine).
The encoder/decoder are small residual volumetric CNNs; the bottleneck snaps
each latent cell to its nearest codebook entry. Codebook entries are updated
by exponential moving averages of their assigned encoder outputs, never by
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .errors import DimensionError, TrainingError, ValidationError
from .shapes import VoxelGrid


@dataclass
class VqConfig:
    input_resolution: int = 16
    latent_resolution: int = 4
    codebook_size: int = 128
    code_dim: int = 32
    widths: Tuple[int, int, int] = (16, 32, 64)
    commitment_weight: float = 0.25
    ema_decay: float = 0.99
    laplace_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        ratio = self.input_resolution // self.latent_resolution
        if self.latent_resolution * ratio != self.input_resolution or ratio & (ratio - 1):
            raise ValidationError(
                f"input/latent resolution ratio must be a power of two; "
                f"got {self.input_resolution}/{self.latent_resolution}"
            )
        if ratio != 4:
            raise ValidationError(
                f"encoder uses two stride-2 stages (ratio 4); got ratio {ratio}"
            )
        if self.codebook_size < 2:
            raise ValidationError(f"codebook size {self.codebook_size} < 2")
        if len(self.widths) != 3:
            raise ValidationError(f"widths must have 3 entries, got {self.widths}")

    @property
    def n_latent(self) -> int:
        return self.latent_resolution**3


@dataclass
class TokenGrid:
    """Grid of codebook indices; never contains the mask token."""

    latent_resolution: int
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices)
        r = self.latent_resolution
        if idx.shape != (r, r, r):
            raise DimensionError(f"token grid shape {idx.shape} != ({r},{r},{r})")
        self.indices = idx.astype(np.int64)

    def flat(self) -> np.ndarray:
        return self.indices.reshape(-1)


class Codebook:
    """Ordered latent code vectors with EMA assignment statistics."""

    def __init__(self, size: int, dim: int, decay: float = 0.99, eps: float = 1e-5, seed: int = 0):
        if size < 2:
            raise ValidationError(f"codebook size {size} < 2")
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xCB))))
        self.entries = (rng.normal(size=(size, dim)) / np.sqrt(dim)).astype(np.float32)
        self.ema_counts = np.zeros(size, dtype=np.float64)
        self.ema_sums = np.zeros((size, dim), dtype=np.float64)
        self.decay = float(decay)
        self.eps = float(eps)
        self.lifetime = np.zeros(size, dtype=np.int64)
        self.seed = seed
        self.updates = 0

    @property
    def size(self) -> int:
        return int(self.entries.shape[0])

    @property
    def dim(self) -> int:
        return int(self.entries.shape[1])

    def state_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        return {
            f"{prefix}.entries": self.entries.astype(np.float32),
            f"{prefix}.ema_counts": self.ema_counts.astype(np.float32),
            f"{prefix}.ema_sums": self.ema_sums.astype(np.float32),
            f"{prefix}.lifetime": self.lifetime.astype(np.float32),
        }

    def load_state_arrays(self, prefix: str, state: Dict[str, np.ndarray]):
        self.entries = np.asarray(state[f"{prefix}.entries"], dtype=np.float32).copy()
        self.ema_counts = np.asarray(state[f"{prefix}.ema_counts"], dtype=np.float64).copy()
        self.ema_sums = np.asarray(state[f"{prefix}.ema_sums"], dtype=np.float64).copy()
        self.lifetime = np.asarray(state[f"{prefix}.lifetime"], dtype=np.int64).copy()


def quantize(z_e: np.ndarray, codebook: Codebook) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest codebook entry per row (squared Euclidean, lowest index wins)."""
    z = np.asarray(z_e, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != codebook.dim:
        raise DimensionError(f"quantize expects (n,{codebook.dim}) rows, got {z.shape}")
    e = codebook.entries.astype(np.float64)
    d2 = (z * z).sum(axis=1, keepdims=True) - 2.0 * (z @ e.T) + (e * e).sum(axis=1)
    tokens = np.argmin(d2, axis=1)
    return tokens.astype(np.int64), codebook.entries[tokens].copy()


def ema_update(codebook: Codebook, z_e: np.ndarray, tokens: np.ndarray) -> Codebook:
    """Decay-and-accumulate the per-entry statistics, then refresh entries.

    Entries are sums/counts with the counts floored at eps, so an entry that
    received no assignments this round keeps its value while its bookkeeping
    decays. Entries that have never been assigned in their lifetime are
    re-seeded from rows of the current batch.
    """
    z = np.asarray(z_e, dtype=np.float64).reshape(-1, codebook.dim)
    tokens = np.asarray(tokens).reshape(-1)
    lam = codebook.decay
    K = codebook.size
    batch_counts = np.bincount(tokens, minlength=K).astype(np.float64)
    batch_sums = np.zeros((K, codebook.dim), dtype=np.float64)
    np.add.at(batch_sums, tokens, z)
    codebook.ema_counts = lam * codebook.ema_counts + (1.0 - lam) * batch_counts
    codebook.ema_sums = lam * codebook.ema_sums + (1.0 - lam) * batch_sums
    codebook.lifetime += batch_counts.astype(np.int64)
    denom = np.maximum(codebook.ema_counts, codebook.eps)
    codebook.entries = (codebook.ema_sums / denom[:, None]).astype(np.float32)
    dead = np.flatnonzero(codebook.lifetime == 0)
    if dead.size:
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((codebook.seed, 0xDE, codebook.updates)))
        )
        picks = rng.choice(z.shape[0], size=dead.size, replace=z.shape[0] < dead.size)
        codebook.entries[dead] = z[picks].astype(np.float32)
    codebook.updates += 1
    return codebook


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(size=shape) * np.sqrt(2.0 / fan_in)


class VqModel:
    """Encoder + codebook + decoder for one resolution."""

    def __init__(self, cfg: VqConfig):
        self.cfg = cfg
        self.store = nx.ParamStore()
        self.codebook = Codebook(
            cfg.codebook_size, cfg.code_dim, cfg.ema_decay, cfg.laplace_eps, seed=cfg.seed
        )
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 0x71))))
        w0, w1, w2 = cfg.widths
        d = cfg.code_dim
        add = self.store.add
        # encoder
        add("enc.down1.w", _he(rng, (w0, 1, 3, 3, 3), 27))
        add("enc.down1.b", np.zeros(w0))
        self._res_params(rng, "enc.res1", w0)
        add("enc.down2.w", _he(rng, (w1, w0, 3, 3, 3), w0 * 27))
        add("enc.down2.b", np.zeros(w1))
        self._res_params(rng, "enc.res2", w1)
        add("enc.mix.w", _he(rng, (w2, w1, 3, 3, 3), w1 * 27))
        add("enc.mix.b", np.zeros(w2))
        add("enc.head.w", _he(rng, (d, w2, 1, 1, 1), w2))
        add("enc.head.b", np.zeros(d))
        # decoder
        add("dec.head.w", _he(rng, (w2, d, 1, 1, 1), d))
        add("dec.head.b", np.zeros(w2))
        self._res_params(rng, "dec.res", w2)
        add("dec.mix.w", _he(rng, (w1, w2, 3, 3, 3), w2 * 27))
        add("dec.mix.b", np.zeros(w1))
        add("dec.up1.w", _he(rng, (w0, w1, 3, 3, 3), w1 * 27))
        add("dec.up1.b", np.zeros(w0))
        add("dec.out.w", _he(rng, (1, w0, 3, 3, 3), w0 * 27))
        add("dec.out.b", np.zeros(1))

    def _res_params(self, rng, prefix: str, width: int):
        self.store.add(f"{prefix}.a.w", _he(rng, (width, width, 3, 3, 3), width * 27))
        self.store.add(f"{prefix}.a.b", np.zeros(width))
        self.store.add(f"{prefix}.b.w", _he(rng, (width, width, 3, 3, 3), width * 27))
        self.store.add(f"{prefix}.b.b", np.zeros(width))

    # -- forward pieces ----------------------------------------------------
    def _conv(self, x, name: str, pad: int = 1):
        s = self.store
        y = nx.conv3d(x, s[f"{name}.w"], stride=1, pad=pad)
        return y + nx.reshape(s[f"{name}.b"], (1, -1, 1, 1, 1))

    def _resblock(self, x, prefix: str):
        h = nx.relu(self._conv(x, f"{prefix}.a"))
        h = self._conv(h, f"{prefix}.b")
        return nx.relu(x + h)

    @staticmethod
    def _pool2(x: nx.Tensor) -> nx.Tensor:
        B, C, D, H, W = x.shape
        h = nx.reshape(x, (B, C, D // 2, 2, H // 2, 2, W // 2, 2))
        return nx.tmean(h, axis=(3, 5, 7))

    def encode_batch(self, grids: np.ndarray) -> nx.Tensor:
        """(B, R, R, R) occupancy -> (B, n_latent, code_dim) pre-quantization."""
        cfg = self.cfg
        B = grids.shape[0]
        if grids.shape[1:] != (cfg.input_resolution,) * 3:
            raise DimensionError(
                f"encoder expects resolution {cfg.input_resolution}, got {grids.shape[1:]}"
            )
        x = nx.constant(grids.reshape(B, 1, *grids.shape[1:]).astype(np.float32))
        h = self._pool2(nx.relu(self._conv(x, "enc.down1")))
        h = self._resblock(h, "enc.res1")
        h = self._pool2(nx.relu(self._conv(h, "enc.down2")))
        h = self._resblock(h, "enc.res2")
        h = nx.relu(self._conv(h, "enc.mix"))
        z = self._conv(h, "enc.head", pad=0)
        lat = cfg.latent_resolution
        z = nx.reshape(z, (B, cfg.code_dim, lat**3))
        return nx.transpose(z, (0, 2, 1))

    def decode_batch(self, z_q: nx.Tensor) -> nx.Tensor:
        """(B, n_latent, code_dim) -> (B, 1, R, R, R) occupancy in (0,1)."""
        cfg = self.cfg
        lat = cfg.latent_resolution
        B = z_q.shape[0]
        h = nx.transpose(z_q, (0, 2, 1))
        h = nx.reshape(h, (B, cfg.code_dim, lat, lat, lat))
        h = nx.relu(self._conv(h, "dec.head", pad=0))
        h = self._resblock(h, "dec.res")
        h = nx.relu(self._conv(h, "dec.mix"))
        h = nx.upsample_nearest3d(h, 2)
        h = nx.relu(self._conv(h, "dec.up1"))
        h = nx.upsample_nearest3d(h, 2)
        return nx.sigmoid(self._conv(h, "dec.out"))


def encode(model: VqModel, grid: VoxelGrid) -> np.ndarray:
    """Continuous latent rows for one grid: (n_latent, code_dim)."""
    if grid.resolution != model.cfg.input_resolution:
        raise DimensionError(
            f"grid resolution {grid.resolution} != model input {model.cfg.input_resolution}"
        )
    with nx.no_grad():
        z = model.encode_batch(grid.occupancy[None])
    return z.data[0].copy()


def decode(model: VqModel, z_q: np.ndarray) -> VoxelGrid:
    """Continuous occupancy grid from quantized latent rows."""
    z_q = np.asarray(z_q, dtype=np.float32)
    if z_q.shape != (model.cfg.n_latent, model.cfg.code_dim):
        raise DimensionError(
            f"z_q shape {z_q.shape} != ({model.cfg.n_latent}, {model.cfg.code_dim})"
        )
    with nx.no_grad():
        out = model.decode_batch(nx.constant(z_q[None]))
    return VoxelGrid(model.cfg.input_resolution, out.data[0, 0])


def encode_tokens(model: VqModel, grid: VoxelGrid) -> TokenGrid:
    z_e = encode(model, grid)
    tokens, _ = quantize(z_e, model.codebook)
    lat = model.cfg.latent_resolution
    return TokenGrid(lat, tokens.reshape(lat, lat, lat))


def decode_tokens(model: VqModel, tokens: TokenGrid) -> VoxelGrid:
    if tokens.indices.max(initial=0) >= model.codebook.size:
        raise ValidationError(
            f"token id {tokens.indices.max()} out of range for codebook size {model.codebook.size}"
        )
    z_q = model.codebook.entries[tokens.flat()]
    return decode(model, z_q)


def reconstruct(model: VqModel, grid: VoxelGrid, threshold: float = 0.5) -> VoxelGrid:
    return decode_tokens(model, encode_tokens(model, grid)).binarize(threshold)


def vq_train_step(
    model: VqModel,
    grids: np.ndarray,
    opt: nx.OptimizerConfig,
) -> Dict[str, float]:
    """One gradient step on reconstruction + commitment; EMA codebook update.

    The quantized latent enters the decoder as z_e + stopgrad(z_q - z_e), so
    the decoder gradient reaches the encoder unchanged; codebook entries see
    no gradient at all.
    """
    if grids.shape[0] == 0:
        raise ValidationError("empty batch")
    cfg = model.cfg
    z_e = model.encode_batch(grids)
    flat = z_e.data.reshape(-1, cfg.code_dim)
    tokens, z_q = quantize(flat, model.codebook)
    z_q = z_q.reshape(z_e.shape)
    z_q_st = z_e + nx.constant(z_q - z_e.data)
    recon = model.decode_batch(z_q_st)
    target = nx.constant(grids.reshape(recon.shape).astype(np.float32))
    rec_loss = nx.tmean(nx.square(recon - target))
    commit = nx.tmean(nx.square(z_e - nx.constant(z_q)))
    total = rec_loss + commit * cfg.commitment_weight
    if not np.isfinite(total.data):
        raise TrainingError(
            f"non-finite loss: reconstruction={rec_loss.data}, commitment={commit.data}"
        )
    total.backward()
    nx.adam_step(model.store, opt)
    ema_update(model.codebook, flat, tokens)
    return {"reconstruction": float(rec_loss.data), "commitment": float(commit.data)}


def train_vqvae(
    model: VqModel,
    grids: Sequence[VoxelGrid],
    steps: int,
    batch_size: int,
    opt: nx.OptimizerConfig,
    seed: int = 0,
    log_every: int = 0,
) -> List[Dict[str, float]]:
    """Seeded minibatch loop over the given grids; returns per-step losses."""
    occ = np.stack([g.occupancy for g in grids])
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x57))))
    history: List[Dict[str, float]] = []
    for step in range(steps):
        idx = rng.choice(len(grids), size=min(batch_size, len(grids)), replace=False)
        losses = vq_train_step(model, occ[idx], opt)
        history.append(losses)
        if log_every and (step + 1) % log_every == 0:
            print(
                f"  vq step {step + 1}/{steps} "
                f"rec={losses['reconstruction']:.4f} commit={losses['commitment']:.4f}"
            )
    return history
