"""The speech tokenizer: trainable acoustic encoder with frozen semantic
teacher injection, 16-layer RVQ bottleneck, semantic distillation decoder,
and non-streaming / streaming acoustic decoders.

Streaming decode is frame-stepped end to end (dequantize -> 4x upsample ->
causal decoder step), so chunked and whole-grid decoding run the exact same
sequence of floating-point operations and agree bitwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .frontend import (
    Downsample4,
    FrontendConfig,
    TeacherFeaturizer,
    Upsample4,
    acoustic_features,
)
from .rvq import (
    CodebookSet,
    TokenGrid,
    commitment_penalty,
    dequantize,
    dequantize_frame,
    ema_update,
    init_codebooks,
    quantize,
    straight_through,
)


class TokenizerError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TokenizerConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    enc_dim: int = 32             # acoustic encoder output width
    adapter_dim: int = 32         # adapter output width (concatenated with enc_dim)
    hidden: int = 128
    head_hidden: int = 512        # decoder output head; must cover the waveform basis rank
    kernel: int = 5
    n_layers: int = 16
    n_entries: int = 2048
    decay: float = 0.99
    lambda_sem: float = 1.0
    commit_beta: float = 0.25


@dataclass
class TokenizerLosses:
    recon: float
    semantic: float
    commit: float
    perceptual: float
    total: float
    total_tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class TokenizerTrainConfig:
    seed: int = 0
    steps: int = 1200
    batch_size: int = 8
    lr: float = 3e-3
    reseed_warmup: int = 50
    stage2_steps: int = 600
    stage2_lr: float = 3e-3
    model: TokenizerConfig = field(default_factory=TokenizerConfig)


class CausalConv1d(nn.Module):
    """Left-padded 1-D conv over (T, C) sequences with a single-step API."""

    def __init__(self, cin: int, cout: int, kernel: int, dilation: int = 1):
        super().__init__()
        self.conv = nn.Conv1d(cin, cout, kernel, dilation=dilation)
        self.left = (kernel - 1) * dilation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.pad(x.T.unsqueeze(0), (self.left, 0))
        return self.conv(y).squeeze(0).T

    def init_state(self, dtype: torch.dtype) -> torch.Tensor:
        return torch.zeros(self.conv.weight.shape[1], self.left, dtype=dtype)

    def step(self, x_t: torch.Tensor, state: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        window = torch.cat([state, x_t.T], dim=1)       # (C, left+1)
        y = self.conv(window.unsqueeze(0)).squeeze(0).T  # (1, Cout)
        return y, window[:, 1:]


class CenteredConv1d(nn.Module):
    """Same-length conv with symmetric padding (non-streaming decoder only)."""

    def __init__(self, cin: int, cout: int, kernel: int, dilation: int = 1):
        super().__init__()
        if kernel % 2 != 1:
            raise TokenizerError("centered conv needs an odd kernel")
        self.conv = nn.Conv1d(cin, cout, kernel, dilation=dilation)
        self.pad = (kernel - 1) * dilation // 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.pad(x.T.unsqueeze(0), (self.pad, self.pad))
        return self.conv(y).squeeze(0).T


class GatedBlock(nn.Module):
    """Residual conv block with GLU gating."""

    def __init__(self, channels: int, kernel: int, dilation: int, causal: bool = True):
        super().__init__()
        conv_cls = CausalConv1d if causal else CenteredConv1d
        self.conv = conv_cls(channels, 2 * channels, kernel, dilation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + F.glu(self.conv(x), dim=1)

    def init_state(self, dtype: torch.dtype) -> torch.Tensor:
        return self.conv.init_state(dtype)

    def step(self, x_t: torch.Tensor, state: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        y, state = self.conv.step(x_t, state)
        return x_t + F.glu(y, dim=1), state


class ConvEncoder(nn.Module):
    """2-block gated causal conv stack, 50 Hz in / 50 Hz out."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, kernel: int):
        super().__init__()
        self.inp = CausalConv1d(in_dim, hidden, kernel)
        self.block1 = GatedBlock(hidden, kernel, 1)
        self.block2 = GatedBlock(hidden, kernel, 2)
        self.out = nn.Linear(hidden, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.inp(x))
        h = self.block2(self.block1(h))
        return self.out(h)


class AcousticDecoder(nn.Module):
    """Maps 50 Hz features to waveform samples, `hop` samples per frame.

    Causal variant: left-only receptive field of 4 + 4 + 8 = 16 frames
    (320 ms); the output head is per-frame. Frame t of the output depends
    only on input frames <= t.
    """

    def __init__(self, in_dim: int, hidden: int, head_hidden: int, hop: int,
                 kernel: int, causal: bool):
        super().__init__()
        self.causal = causal
        self.hop = hop
        conv_cls = CausalConv1d if causal else CenteredConv1d
        self.inp = conv_cls(in_dim, hidden, kernel)
        self.block1 = GatedBlock(hidden, kernel, 1, causal)
        self.block2 = GatedBlock(hidden, kernel, 2, causal)
        self.head1 = nn.Linear(hidden, head_hidden)
        self.head2 = nn.Linear(head_hidden, hop)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.inp(u))
        h = self.block2(self.block1(h))
        frames = self.head2(F.gelu(self.head1(h)))   # (T, hop)
        return frames.reshape(-1)

    def init_state(self, dtype: torch.dtype) -> list[torch.Tensor]:
        return [self.inp.init_state(dtype), self.block1.init_state(dtype),
                self.block2.init_state(dtype)]

    def step(self, u_t: torch.Tensor, state: list[torch.Tensor]
             ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """One 50 Hz frame in, `hop` samples out."""
        if not self.causal:
            raise TokenizerError("step() requires the causal decoder")
        h, s0 = self.inp.step(u_t, state[0])
        h = F.gelu(h)
        h, s1 = self.block1.step(h, state[1])
        h, s2 = self.block2.step(h, state[2])
        return self.head2(F.gelu(self.head1(h))).reshape(-1), [s0, s1, s2]


class SemanticDecoder(nn.Module):
    """Predicts the frozen teacher features from upsampled quantized latents."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, kernel: int):
        super().__init__()
        self.inp = CausalConv1d(in_dim, hidden, kernel)
        self.block = GatedBlock(hidden, kernel, 1)
        self.out = nn.Linear(hidden, out_dim)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        return self.out(self.block(F.gelu(self.inp(u))))


class TokenizerModel(nn.Module):
    """Complete tokenizer; `streaming_mode` selects the active acoustic decoder."""

    def __init__(self, cfg: TokenizerConfig, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.cfg = cfg
        fc = cfg.frontend
        self.teacher = TeacherFeaturizer(fc)
        self.acoustic_encoder = ConvEncoder(fc.n_filters, cfg.hidden, cfg.enc_dim, cfg.kernel)
        self.adapter = nn.Linear(fc.teacher_dim, cfg.adapter_dim)
        self.down = Downsample4(cfg.enc_dim + cfg.adapter_dim, fc.d_latent)
        self.up = Upsample4(fc.d_latent, fc.d_latent)
        self.semantic_decoder = SemanticDecoder(fc.d_latent, cfg.hidden, fc.teacher_dim, cfg.kernel)
        self.decoder_ns = AcousticDecoder(
            fc.d_latent, cfg.hidden, cfg.head_hidden, fc.hop_samples, cfg.kernel, causal=False)
        self.decoder_stream = AcousticDecoder(
            fc.d_latent, cfg.hidden, cfg.head_hidden, fc.hop_samples, cfg.kernel, causal=True)
        self.codebooks = CodebookSet(cfg.n_layers, cfg.n_entries, fc.d_latent,
                                     cfg.decay, init_seed=seed)
        self.streaming_mode = False

    def active_decoder(self) -> AcousticDecoder:
        return self.decoder_stream if self.streaming_mode else self.decoder_ns

    def latent(self, audio: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Pre-quantization 12.5 Hz latent plus the 50 Hz features and teacher targets."""
        feats = acoustic_features(audio, self.cfg.frontend).frames
        teach = self.teacher(audio).frames
        a = self.acoustic_encoder(feats)
        s = self.adapter(teach)
        z = self.down(torch.cat([a, s], dim=1))
        return z, feats, teach

    @torch.no_grad()
    def encode(self, audio: torch.Tensor | np.ndarray) -> TokenGrid:
        if isinstance(audio, np.ndarray):
            audio = torch.from_numpy(audio).float()
        z, _, _ = self.latent(audio)
        grid, _, _ = quantize(z, self.codebooks)
        return grid

    @torch.no_grad()
    def decode(self, grid: TokenGrid, n_samples: int | None = None) -> np.ndarray:
        """Reconstruct a waveform; truncated to n_samples when given.

        In streaming mode this is the frame-stepped path, so it is bitwise
        identical to concatenating stream_decode chunks.
        """
        if grid.n_frames == 0:
            raise TokenizerError("cannot decode an empty token grid")
        hop = self.cfg.frontend.hop_samples
        max_samples = grid.n_frames * 4 * hop
        if n_samples is None:
            n_samples = max_samples
        if n_samples > max_samples:
            raise TokenizerError(f"n_samples {n_samples} exceeds {max_samples}")
        if self.streaming_mode:
            wav = torch.cat(list(self.stream_decode(grid, chunk_frames=grid.n_frames)))
        else:
            u = self.up(dequantize(grid, self.codebooks), 4 * grid.n_frames)
            wav = self.decoder_ns(u)
        return wav[:n_samples].numpy().astype(np.float32)

    @torch.no_grad()
    def stream_decode(self, grid: TokenGrid, chunk_frames: int) -> Iterator[torch.Tensor]:
        """Yield one audio chunk per chunk_frames token frames.

        Every chunking performs the identical per-frame computation; chunk t
        never depends on token frames beyond its own span.
        """
        if not self.streaming_mode:
            raise TokenizerError("stream_decode requires streaming_mode")
        if chunk_frames < 1:
            raise TokenizerError("chunk_frames must be >= 1")
        grid.validate()
        state = self.decoder_stream.init_state(self.up.proj.weight.dtype)
        pending: list[torch.Tensor] = []
        for t in range(grid.n_frames):
            latent = dequantize_frame(grid.codes[t], self.codebooks,
                                      dtype=self.up.proj.weight.dtype)
            frames50 = self.up.step(latent[0])
            for j in range(4):
                samples, state = self.decoder_stream.step(frames50[j : j + 1], state)
                pending.append(samples)
            if (t + 1) % chunk_frames == 0:
                yield torch.cat(pending)
                pending = []
        if pending:
            yield torch.cat(pending)


def training_loss(
    model: TokenizerModel,
    audio: torch.Tensor,
    frozen: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> tuple[TokenizerLosses, TokenGrid | None, torch.Tensor]:
    """Stage-1 loss: waveform L1 + log-filterbank L1, semantic MSE against the
    frozen teacher, commitment penalty, and a perceptual-loss extension hook
    that currently contributes 0.

    `frozen=(z_base, q_base)` replaces the quantizer with its straight-through
    linearization at the base point; used by gradient checks, where the loss
    must be smooth while keeping the same value and gradient at the base.
    """
    cfg = model.cfg
    feats = acoustic_features(audio, cfg.frontend).frames
    teach = model.teacher(audio).frames
    a = model.acoustic_encoder(feats)
    s = model.adapter(teach)
    z = model.down(torch.cat([a, s], dim=1))
    if frozen is None:
        grid, q, _ = quantize(z, model.codebooks)
        q_ste = straight_through(z, q)
        commit = commitment_penalty(z, q, cfg.commit_beta)
    else:
        z_base, q_base = frozen
        grid = None
        q_ste = z + (q_base - z_base)
        commit = cfg.commit_beta * ((z - q_base) ** 2).mean()
    t50 = feats.shape[0]
    u = model.up(q_ste, t50)
    sem = ((model.semantic_decoder(u) - teach) ** 2).mean()
    wav = model.active_decoder()(u)[: audio.shape[0]]
    recon = (wav - audio).abs().mean() + (
        acoustic_features(wav, cfg.frontend).frames - feats).abs().mean()
    perceptual = torch.zeros((), dtype=z.dtype)
    total = recon + cfg.lambda_sem * sem + commit + perceptual
    losses = TokenizerLosses(
        recon=float(recon.detach()), semantic=float(sem.detach()),
        commit=float(commit.detach()), perceptual=float(perceptual.detach()),
        total=float(total.detach()), total_tensor=total)
    return losses, grid, z


def _stage1_params(model: TokenizerModel) -> list[torch.Tensor]:
    mods = [model.acoustic_encoder, model.adapter, model.down, model.up,
            model.semantic_decoder, model.decoder_ns]
    return [p for m in mods for p in m.parameters()]


def train_stage1(
    utterances: list,
    cfg: TokenizerTrainConfig,
    log: list[dict] | None = None,
) -> TokenizerModel:
    """Joint training of encoder, projections, codebooks (EMA), semantic
    decoder, and the non-streaming acoustic decoder."""
    if not utterances:
        raise TokenizerError("empty training corpus")
    torch.set_num_threads(1)    # reproducible reductions; toy sizes don't benefit from threads
    model = TokenizerModel(cfg.model, seed=cfg.seed)
    audios = [torch.from_numpy(u.audio).float() for u in utterances]

    with torch.no_grad():
        z0 = torch.cat([model.latent(a)[0] for a in audios])
    init_codebooks(model.codebooks, z0, seed=cfg.seed)

    opt = torch.optim.Adam(_stage1_params(model), lr=cfg.lr)
    order_rng = np.random.default_rng(cfg.seed)
    reseed_rng = np.random.default_rng(cfg.seed + 1)
    n = len(audios)
    perm = order_rng.permutation(n)
    cursor = 0
    for step in range(cfg.steps):
        idx = []
        for _ in range(min(cfg.batch_size, n)):
            if cursor == n:
                perm = order_rng.permutation(n)
                cursor = 0
            idx.append(int(perm[cursor]))
            cursor += 1
        opt.zero_grad()
        step_losses = []
        zs, code_rows = [], []
        for i in idx:
            losses, grid, z = training_loss(model, audios[i])
            (losses.total_tensor / len(idx)).backward()
            step_losses.append(losses)
            zs.append(z.detach())
            code_rows.append(grid.codes)
        mean_total = float(np.mean([l.total for l in step_losses]))
        if not np.isfinite(mean_total):
            raise TrainingDiverged(step, mean_total)
        opt.step()
        batch_grid = TokenGrid(np.concatenate(code_rows), model.codebooks.n_entries)
        ema_update(model.codebooks, torch.cat(zs), batch_grid,
                   reseed_rng=reseed_rng, warmed_up=step >= cfg.reseed_warmup)
        if log is not None:
            log.append({
                "step": step,
                "total": mean_total,
                "recon": float(np.mean([l.recon for l in step_losses])),
                "semantic": float(np.mean([l.semantic for l in step_losses])),
                "commit": float(np.mean([l.commit for l in step_losses])),
            })
    return model


def train_stage2(
    model: TokenizerModel,
    utterances: list,
    cfg: TokenizerTrainConfig,
    log: list[dict] | None = None,
) -> TokenizerModel:
    """Freeze the encoding side and train only the streaming acoustic decoder.

    Encoder, adapter, projections, codebooks, and the semantic decoder are
    bit-identical before and after.
    """
    if not utterances:
        raise TokenizerError("empty training corpus")
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed + 2)
    audios = [torch.from_numpy(u.audio).float() for u in utterances]
    fc = model.cfg.frontend

    # Frozen encode side: precompute the streaming decoder's inputs once.
    inputs, targets_wav, targets_fb = [], [], []
    with torch.no_grad():
        for a in audios:
            z, feats, _ = model.latent(a)
            grid, q, _ = quantize(z, model.codebooks)
            inputs.append(model.up(q, feats.shape[0]))
            targets_wav.append(a)
            targets_fb.append(feats)

    model.streaming_mode = True
    opt = torch.optim.Adam(model.decoder_stream.parameters(), lr=cfg.stage2_lr)
    order_rng = np.random.default_rng(cfg.seed + 3)
    n = len(audios)
    for step in range(cfg.stage2_steps):
        idx = [int(i) for i in order_rng.integers(0, n, size=min(cfg.batch_size, n))]
        opt.zero_grad()
        totals = []
        for i in idx:
            wav = model.decoder_stream(inputs[i])[: targets_wav[i].shape[0]]
            loss = (wav - targets_wav[i]).abs().mean() + (
                acoustic_features(wav, fc).frames - targets_fb[i]).abs().mean()
            (loss / len(idx)).backward()
            totals.append(float(loss))
        mean_total = float(np.mean(totals))
        if not np.isfinite(mean_total):
            raise TrainingDiverged(step, mean_total)
        opt.step()
        if log is not None:
            log.append({"step": step, "total": mean_total})
    return model


def reconstruction_l1(model: TokenizerModel, audio: np.ndarray) -> float:
    """Log-filterbank L1 between input audio and decode(encode(input))."""
    grid = model.encode(audio)
    wav = model.decode(grid, n_samples=len(audio))
    a = acoustic_features(torch.from_numpy(audio).float(), model.cfg.frontend).frames
    b = acoustic_features(torch.from_numpy(wav).float(), model.cfg.frontend).frames
    return float((a - b).abs().mean())


def save_tokenizer(model: TokenizerModel, path, extra_meta: dict | None = None) -> None:
    from .serde import to_dict

    tensors = {f"module.{k}": v for k, v in model.state_dict().items()}
    tensors["codebooks.vectors"] = model.codebooks.vectors
    tensors["codebooks.ema_counts"] = model.codebooks.ema_counts
    tensors["codebooks.ema_sums"] = model.codebooks.ema_sums
    meta = {
        "kind": "tokenizer",
        "config": to_dict(model.cfg),
        "streaming_mode": model.streaming_mode,
    }
    meta.update(extra_meta or {})
    ckpt.save_bundle(path, tensors, meta)


def load_tokenizer(path) -> TokenizerModel:
    from .serde import from_dict

    tensors, meta = ckpt.load_bundle(path)
    if meta.get("kind") != "tokenizer":
        raise TokenizerError(f"{path}: not a tokenizer checkpoint")
    cfg = from_dict(TokenizerConfig, meta["config"])
    model = TokenizerModel(cfg, seed=0)
    state = {k[len("module."):]: v for k, v in tensors.items() if k.startswith("module.")}
    model.load_state_dict(state)
    model.codebooks.vectors = tensors["codebooks.vectors"].clone()
    model.codebooks.ema_counts = tensors["codebooks.ema_counts"].clone()
    model.codebooks.ema_sums = tensors["codebooks.ema_sums"].clone()
    model.streaming_mode = bool(meta["streaming_mode"])
    return model
