"""Residual vector quantizer with EMA codebook learning.

Layer l quantizes the residual left by layers < l against its own codebook;
reconstruction is the sum of the selected vectors. Code selection runs in
float64 with first-index tie-breaking so the argmin is reproducible and
independent of BLAS blocking; stored vectors stay float32.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

CODEBOOK_MAGIC = b"DTCB"
GRID_MAGIC = b"DTTG"
FORMAT_VERSION = 1

DEFAULT_LAYERS = 16
DEFAULT_ENTRIES = 2048
DEFAULT_DIM = 64
DEFAULT_DECAY = 0.99
COMMIT_BETA = 0.25
DEAD_COUNT_THRESHOLD = 1e-3
EMA_EPS = 1e-8


class RvqError(ValueError):
    pass


@dataclass
class TokenGrid:
    """T frames x L layers of code indices."""

    codes: np.ndarray             # (n_frames, n_layers) int64
    n_entries: int

    def __post_init__(self) -> None:
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 2:
            raise RvqError(f"codes must be 2-D, got shape {self.codes.shape}")

    @property
    def n_frames(self) -> int:
        return int(self.codes.shape[0])

    @property
    def n_layers(self) -> int:
        return int(self.codes.shape[1])

    def validate(self) -> None:
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.n_entries):
            bad = np.argwhere((self.codes < 0) | (self.codes >= self.n_entries))[0]
            raise RvqError(
                f"code out of range at frame {bad[0]}, layer {bad[1]}: "
                f"{self.codes[bad[0], bad[1]]} not in [0, {self.n_entries})")

    def save(self, path: str | Path) -> None:
        self.validate()
        if self.n_entries > 1 << 16:
            raise RvqError("u16 grid format supports at most 65536 entries")
        header = GRID_MAGIC + struct.pack(
            "<IIII", FORMAT_VERSION, self.n_frames, self.n_layers, self.n_entries)
        Path(path).write_bytes(header + self.codes.astype("<u2").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "TokenGrid":
        raw = Path(path).read_bytes()
        if raw[:4] != GRID_MAGIC:
            raise RvqError(f"{path}: not a token grid file")
        version, n_frames, n_layers, n_entries = struct.unpack_from("<IIII", raw, 4)
        if version != FORMAT_VERSION:
            raise RvqError(f"{path}: unsupported version {version}")
        codes = np.frombuffer(raw, dtype="<u2", offset=20, count=n_frames * n_layers)
        return cls(codes.reshape(n_frames, n_layers).astype(np.int64), n_entries)


class CodebookSet:
    """L layers x K entries x D dims of code vectors with EMA statistics."""

    def __init__(
        self,
        n_layers: int = DEFAULT_LAYERS,
        n_entries: int = DEFAULT_ENTRIES,
        dim: int = DEFAULT_DIM,
        decay: float = DEFAULT_DECAY,
        init_seed: int = 0,
    ):
        self.n_layers = n_layers
        self.n_entries = n_entries
        self.dim = dim
        self.decay = decay
        rng = np.random.default_rng(init_seed)
        v = rng.standard_normal((n_layers, n_entries, dim)).astype(np.float32) * 0.01
        self.vectors = torch.from_numpy(v)
        self.ema_counts = torch.ones(n_layers, n_entries)
        self.ema_sums = self.vectors.clone()

    def clone(self) -> "CodebookSet":
        cb = CodebookSet.__new__(CodebookSet)
        cb.n_layers, cb.n_entries, cb.dim, cb.decay = (
            self.n_layers, self.n_entries, self.dim, self.decay)
        cb.vectors = self.vectors.clone()
        cb.ema_counts = self.ema_counts.clone()
        cb.ema_sums = self.ema_sums.clone()
        return cb

    def save(self, path: str | Path) -> None:
        header = CODEBOOK_MAGIC + struct.pack(
            "<IIIId", FORMAT_VERSION, self.n_layers, self.n_entries, self.dim, self.decay)
        body = (
            self.vectors.numpy().astype("<f4").tobytes()
            + self.ema_counts.numpy().astype("<f4").tobytes()
            + self.ema_sums.numpy().astype("<f4").tobytes()
        )
        Path(path).write_bytes(header + body)

    @classmethod
    def load(cls, path: str | Path) -> "CodebookSet":
        raw = Path(path).read_bytes()
        if raw[:4] != CODEBOOK_MAGIC:
            raise RvqError(f"{path}: not a codebook file")
        version, n_layers, n_entries, dim, decay = struct.unpack_from("<IIIId", raw, 4)
        if version != FORMAT_VERSION:
            raise RvqError(f"{path}: unsupported version {version}")
        cb = cls.__new__(cls)
        cb.n_layers, cb.n_entries, cb.dim, cb.decay = n_layers, n_entries, dim, decay
        off = 4 + struct.calcsize("<IIIId")
        nv = n_layers * n_entries * dim
        vec = np.frombuffer(raw, dtype="<f4", offset=off, count=nv)
        off += 4 * nv
        counts = np.frombuffer(raw, dtype="<f4", offset=off, count=n_layers * n_entries)
        off += 4 * n_layers * n_entries
        sums = np.frombuffer(raw, dtype="<f4", offset=off, count=nv)
        cb.vectors = torch.from_numpy(vec.reshape(n_layers, n_entries, dim).copy())
        cb.ema_counts = torch.from_numpy(counts.reshape(n_layers, n_entries).astype(np.float32))
        cb.ema_sums = torch.from_numpy(sums.reshape(n_layers, n_entries, dim).copy())
        return cb


def _nearest_codes(residual64: torch.Tensor, entries64: torch.Tensor) -> np.ndarray:
    """First-occurrence argmin of squared distance; float64 throughout."""
    d = (
        (residual64**2).sum(1, keepdim=True)
        - 2.0 * residual64 @ entries64.T
        + (entries64**2).sum(1)
    )
    return d.numpy().argmin(axis=1)


@torch.no_grad()
def quantize(x: torch.Tensor, cb: CodebookSet) -> tuple[TokenGrid, torch.Tensor, list[float]]:
    """Quantize (T, dim) features through all layers.

    Returns the token grid, the reconstruction (sum of selected vectors, in
    x's dtype), and the mean squared residual norm after each layer.
    """
    if x.ndim != 2 or x.shape[1] != cb.dim:
        raise RvqError(f"expected (T, {cb.dim}) input, got {tuple(x.shape)}")
    t = x.shape[0]
    residual = x.detach().double()
    quantized = torch.zeros_like(x)
    codes = np.zeros((t, cb.n_layers), dtype=np.int64)
    residual_norms: list[float] = []
    for layer in range(cb.n_layers):
        entries64 = cb.vectors[layer].double()
        idx = _nearest_codes(residual, entries64)
        codes[:, layer] = idx
        selected = cb.vectors[layer][torch.from_numpy(idx)]
        residual = residual - selected.double()
        quantized = quantized + selected.to(x.dtype)
        residual_norms.append(float((residual**2).sum(1).mean()))
    return TokenGrid(codes, cb.n_entries), quantized, residual_norms


def dequantize(grid: TokenGrid, cb: CodebookSet, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sum of indexed code vectors per frame; exact inverse of quantize's
    reconstruction when accumulated in the same dtype."""
    if grid.n_layers != cb.n_layers or grid.n_entries != cb.n_entries:
        raise RvqError(
            f"grid ({grid.n_layers} layers, {grid.n_entries} entries) does not match "
            f"codebooks ({cb.n_layers} layers, {cb.n_entries} entries)")
    grid.validate()
    out = torch.zeros(grid.n_frames, cb.dim, dtype=dtype)
    for layer in range(cb.n_layers):
        idx = torch.from_numpy(grid.codes[:, layer])
        out = out + cb.vectors[layer][idx].to(dtype)
    return out


def dequantize_frame(codes_row: np.ndarray, cb: CodebookSet,
                     dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Single-frame dequantize used by the streaming decode path."""
    out = torch.zeros(1, cb.dim, dtype=dtype)
    for layer in range(cb.n_layers):
        out = out + cb.vectors[layer][int(codes_row[layer])].reshape(1, -1).to(dtype)
    return out


@torch.no_grad()
def ema_update(
    cb: CodebookSet,
    x_batch: torch.Tensor,
    grid: TokenGrid,
    reseed_rng: np.random.Generator | None = None,
    warmed_up: bool = True,
) -> CodebookSet:
    """EMA codebook update from a quantized batch (mutates cb in place).

    Per layer: the inputs are the residuals left by previous layers;
    ema_sums and ema_counts decay toward the batch statistics, vectors are
    their ratio. After warmup, entries whose count fell below the dead
    threshold are reseeded from random batch residuals.
    """
    decay = cb.decay
    x = x_batch.detach().float()
    # Per-layer residual inputs, computed against the snapshot of vectors
    # that produced the assignments (i.e. what quantize saw).
    residuals = []
    residual = x.clone()
    for layer in range(cb.n_layers):
        residuals.append(residual)
        idx = torch.from_numpy(grid.codes[:, layer])
        residual = residual - cb.vectors[layer][idx]
    for layer in range(cb.n_layers):
        idx = torch.from_numpy(grid.codes[:, layer])
        r = residuals[layer]
        batch_counts = torch.zeros(cb.n_entries).index_add_(0, idx, torch.ones(len(idx)))
        batch_sums = torch.zeros(cb.n_entries, cb.dim).index_add_(0, idx, r)
        cb.ema_counts[layer].mul_(decay).add_(batch_counts, alpha=1 - decay)
        cb.ema_sums[layer].mul_(decay).add_(batch_sums, alpha=1 - decay)
        cb.vectors[layer] = cb.ema_sums[layer] / cb.ema_counts[layer].clamp_min(EMA_EPS).unsqueeze(1)
        if warmed_up and reseed_rng is not None:
            dead = (cb.ema_counts[layer] < DEAD_COUNT_THRESHOLD).nonzero().flatten()
            if len(dead) and r.shape[0] > 0:
                picks = reseed_rng.integers(0, r.shape[0], size=len(dead))
                seeds = r[torch.from_numpy(picks)]
                cb.vectors[layer][dead] = seeds
                cb.ema_sums[layer][dead] = seeds
                cb.ema_counts[layer][dead] = 1.0
    return cb


def kmeanspp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ center selection; when fewer points than centers, the
    remainder are jittered copies of random points."""
    n = points.shape[0]
    if n == 0:
        raise RvqError("cannot seed codebook from an empty batch")
    pts = points.astype(np.float64)
    n_real = min(n, k)
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centers[0] = pts[first]
    d2 = ((pts - centers[0]) ** 2).sum(1)
    for i in range(1, n_real):
        total = d2.sum()
        if total <= 0:
            centers[i] = pts[int(rng.integers(0, n))]
        else:
            probs = d2 / total
            centers[i] = pts[int(rng.choice(n, p=probs))]
        d2 = np.minimum(d2, ((pts - centers[i]) ** 2).sum(1))
    if n_real < k:
        scale = max(float(pts.std()), 1e-3)
        extra_idx = rng.integers(0, n, size=k - n_real)
        noise = rng.standard_normal((k - n_real, points.shape[1])) * 0.01 * scale
        centers[n_real:] = pts[extra_idx] + noise
    return centers.astype(np.float32)


@torch.no_grad()
def init_codebooks(cb: CodebookSet, x_batch: torch.Tensor, seed: int = 0) -> CodebookSet:
    """Seed layer l from the residuals left by the already-seeded layers < l."""
    rng = np.random.default_rng(seed)
    residual = x_batch.detach().float().clone()
    for layer in range(cb.n_layers):
        centers = kmeanspp_seed(residual.numpy(), cb.n_entries, rng)
        cb.vectors[layer] = torch.from_numpy(centers)
        cb.ema_sums[layer] = cb.vectors[layer].clone()
        cb.ema_counts[layer] = torch.ones(cb.n_entries)
        idx = torch.from_numpy(
            _nearest_codes(residual.double(), cb.vectors[layer].double()))
        residual = residual - cb.vectors[layer][idx]
    return cb


def straight_through(x: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward value is `quantized`; gradient passes through to x unchanged."""
    if x.shape != quantized.shape:
        raise RvqError(f"shape mismatch {tuple(x.shape)} vs {tuple(quantized.shape)}")
    return x + (quantized - x).detach()


def commitment_penalty(x: torch.Tensor, quantized: torch.Tensor,
                       beta: float = COMMIT_BETA) -> torch.Tensor:
    """beta * mean squared distance between x and its (stop-gradient) quantization."""
    return beta * ((x - quantized.detach()) ** 2).mean()


def bitrate(cb: CodebookSet, frame_rate_hz: float) -> float:
    """Bits per second: frame_rate x n_layers x log2(n_entries)."""
    k = cb.n_entries
    if k <= 0 or (k & (k - 1)) != 0:
        raise RvqError(f"n_entries {k} is not a power of two")
    return frame_rate_hz * cb.n_layers * math.log2(k)
