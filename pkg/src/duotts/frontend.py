"""Audio front end: 50 Hz log-filterbank features, the frozen semantic
teacher, and the trainable 4x resamplers between 50 Hz and 12.5 Hz.

Framing is exact by construction: hop == window == 320 samples at 16 kHz,
so frame t depends only on samples [320*t, 320*t + 320) and the frame count
is ceil(samples / 320).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

SAMPLE_RATE = 16_000
FBANK_FLOOR = 1e-5


class FrontendError(ValueError):
    pass


@dataclass(frozen=True)
class FrontendConfig:
    hop_samples: int = 320        # 16000 / 320 = 50 Hz exactly
    n_filters: int = 24
    teacher_dim: int = 32
    teacher_seed: int = 1234
    d_latent: int = 64
    output_sample_rate: int = 16_000   # stage-2 24 kHz output exists only as config

    def __post_init__(self) -> None:
        if SAMPLE_RATE % self.hop_samples != 0 or SAMPLE_RATE // self.hop_samples != 50:
            raise FrontendError(f"hop_samples {self.hop_samples} does not give 50 Hz at 16 kHz")


@dataclass
class FeatureSeq:
    rate_hz: float
    frames: torch.Tensor          # (T, dim)

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


def frames_at_50hz(n_samples: int, cfg: FrontendConfig) -> int:
    return math.ceil(n_samples / cfg.hop_samples)


def frames_at_12hz5(n_samples: int, cfg: FrontendConfig) -> int:
    return math.ceil(frames_at_50hz(n_samples, cfg) / 4)


def _filterbank_matrix(n_filters: int, n_bins: int, dtype: torch.dtype) -> torch.Tensor:
    """Triangular filters with linearly spaced centers over 0..Nyquist.

    Rows are normalized to unit sum so an all-zero frame maps exactly to
    log(FBANK_FLOOR) in every filter.
    """
    centers = np.linspace(0, n_bins - 1, n_filters + 2)
    fb = np.zeros((n_filters, n_bins))
    for i in range(n_filters):
        left, mid, right = centers[i], centers[i + 1], centers[i + 2]
        bins = np.arange(n_bins)
        up = (bins - left) / max(mid - left, 1e-9)
        down = (right - bins) / max(right - mid, 1e-9)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
        fb[i] /= fb[i].sum()
    return torch.from_numpy(fb).to(dtype)


_FB_CACHE: dict[tuple[int, int, torch.dtype], torch.Tensor] = {}


def acoustic_features(audio: torch.Tensor, cfg: FrontendConfig) -> FeatureSeq:
    """Log-filterbank features at 50 Hz. Differentiable w.r.t. audio."""
    if audio.ndim != 1:
        raise FrontendError(f"expected mono waveform, got shape {tuple(audio.shape)}")
    n = audio.shape[0]
    if n < 1:
        raise FrontendError("empty audio")
    hop = cfg.hop_samples
    n_frames = math.ceil(n / hop)
    pad = n_frames * hop - n
    if pad:
        audio = torch.cat([audio, audio.new_zeros(pad)])
    frames = audio.reshape(n_frames, hop)
    spectrum = torch.fft.rfft(frames, dim=1)
    power = spectrum.real**2 + spectrum.imag**2
    key = (cfg.n_filters, power.shape[1], audio.dtype)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = _filterbank_matrix(cfg.n_filters, power.shape[1], audio.dtype)
    fb = _FB_CACHE[key]
    feats = torch.log(power @ fb.T + FBANK_FLOOR)
    return FeatureSeq(50.0, feats)


class TeacherFeaturizer(nn.Module):
    """Frozen stand-in for a pretrained semantic encoder.

    A seeded random projection of the log-filterbank followed by tanh; it
    never receives gradients and is bit-identical across calls.
    """

    def __init__(self, cfg: FrontendConfig):
        super().__init__()
        rng = np.random.default_rng(cfg.teacher_seed)
        w = rng.standard_normal((cfg.teacher_dim, cfg.n_filters)) / np.sqrt(cfg.n_filters)
        self.register_buffer("weight", torch.from_numpy(w).float())
        self.cfg = cfg

    @torch.no_grad()
    def forward(self, audio: torch.Tensor) -> FeatureSeq:
        feats = acoustic_features(audio.detach(), self.cfg)
        w = self.weight.to(feats.frames.dtype)
        return FeatureSeq(50.0, torch.tanh(feats.frames @ w.T))


def teacher_semantic_features(audio: torch.Tensor, cfg: FrontendConfig) -> FeatureSeq:
    return TeacherFeaturizer(cfg)(audio)


class Downsample4(nn.Module):
    """50 Hz -> 12.5 Hz: right-pad to a multiple of 4, concatenate each group
    of 4 frames along features, project to d_latent."""

    def __init__(self, in_dim: int, d_latent: int):
        super().__init__()
        self.in_dim = in_dim
        self.proj = nn.Linear(4 * in_dim, d_latent)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t, dim = x.shape
        if dim != self.in_dim:
            raise FrontendError(f"expected dim {self.in_dim}, got {dim}")
        t4 = math.ceil(t / 4) * 4
        if t4 != t:
            x = torch.cat([x, x.new_zeros(t4 - t, dim)])
        return self.proj(x.reshape(t4 // 4, 4 * dim))


class Upsample4(nn.Module):
    """12.5 Hz -> 50 Hz: expand each frame to 4 via a trainable map, truncate
    to target_T. Output frame t depends only on input frame floor(t/4)."""

    def __init__(self, d_latent: int, out_dim: int):
        super().__init__()
        self.out_dim = out_dim
        self.proj = nn.Linear(d_latent, 4 * out_dim)

    def forward(self, x: torch.Tensor, target_t: int) -> torch.Tensor:
        t_in = x.shape[0]
        if target_t > 4 * t_in:
            raise FrontendError(f"target_T {target_t} exceeds 4 x {t_in} input frames")
        y = self.proj(x).reshape(4 * t_in, self.out_dim)
        return y[:target_t]

    def step(self, frame: torch.Tensor) -> torch.Tensor:
        """Expand a single 12.5 Hz frame to its 4 output frames."""
        return self.proj(frame.reshape(1, -1)).reshape(4, self.out_dim)
