"""Temporal skill encoder: sliding-window clips -> unit-norm skill embeddings.

Architecture per clip of ``L`` frames: a per-frame MLP backbone, fixed
sinusoidal positional encodings, one single-head self-attention block with a
residual connection, mean pooling over positions, an MLP head down to ``d``
and L2 normalisation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import numkit as nk
from .numkit import Parameter, Tensor
from .simgen import DemoEpisode


@dataclass
class EncoderConfig:
    L: int = 8
    stride: int = 2
    M: int = 64
    d: int = 16
    backbone_dims: Tuple[int, ...] = (32, 32)
    temporal_dims: Tuple[int, ...] = (32,)

    def __post_init__(self):
        self.backbone_dims = tuple(self.backbone_dims)
        self.temporal_dims = tuple(self.temporal_dims)
        if self.L < 2 or self.stride < 1 or self.M < self.L or self.d < 2:
            raise ValueError(f"invalid encoder config {self}")

    @property
    def n_clips(self) -> int:
        return (self.M - self.L) // self.stride + 1


@dataclass
class AugmentationConfig:
    noise_sigma: float = 0.0
    temporal_jitter: int = 0
    dropout_rate: float = 0.0
    # feature-space stand-ins for geometric / colour changes
    mix_sigma: float = 0.0
    offset_sigma: float = 0.0

    def __post_init__(self):
        if min(self.noise_sigma, self.temporal_jitter, self.dropout_rate, self.mix_sigma, self.offset_sigma) < 0:
            raise ValueError("augmentation magnitudes must be >= 0")
        if self.dropout_rate >= 1:
            raise ValueError("dropout_rate must be < 1")


@dataclass
class ClipWindow:
    frames: np.ndarray  # (L, d_obs)
    source: Tuple[int, int] = (0, 0)


# ---------------------------------------------------------------- clips
def subsample_indices(T: int, M: int) -> np.ndarray:
    return np.round(np.linspace(0, T - 1, M)).astype(int)


def clip_array(frames: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """(n_clips, L, d_obs) windows over the uniform M-frame subsample."""
    sub = frames[subsample_indices(len(frames), cfg.M)]
    starts = np.arange(0, cfg.M - cfg.L + 1, cfg.stride)
    return np.stack([sub[s:s + cfg.L] for s in starts])


def make_clips(episode: DemoEpisode, cfg: EncoderConfig, episode_id: int = 0) -> List[ClipWindow]:
    if episode.T < 1:
        raise ValueError(f"episode too short: need at least 1 frame (subsampled to M={cfg.M} >= L={cfg.L})")
    starts = range(0, cfg.M - cfg.L + 1, cfg.stride)
    return [ClipWindow(c, (episode_id, s)) for c, s in zip(clip_array(episode.frames, cfg), starts)]


def clip_end_times(T: int, cfg: EncoderConfig) -> np.ndarray:
    """Original-frame index of the last frame of each clip."""
    idx = subsample_indices(T, cfg.M)
    starts = np.arange(0, cfg.M - cfg.L + 1, cfg.stride)
    return idx[starts + cfg.L - 1]


# ---------------------------------------------------------------- augmentation
def augment_batch(x: np.ndarray, aug: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Augment a (B, L, d_obs) batch of clips."""
    out = np.array(x, dtype=float, copy=True)
    B, L, D = out.shape
    if aug.temporal_jitter > 0:
        shifts = rng.integers(-aug.temporal_jitter, aug.temporal_jitter + 1, size=B)
        pos = np.clip(np.arange(L)[None, :] + shifts[:, None], 0, L - 1)
        out = out[np.arange(B)[:, None], pos]
    if aug.mix_sigma > 0:
        mix = np.eye(D) + aug.mix_sigma * rng.normal(size=(B, D, D)) / np.sqrt(D)
        out = out @ mix
    if aug.offset_sigma > 0:
        out = out + aug.offset_sigma * rng.normal(size=(B, 1, D))
    if aug.noise_sigma > 0:
        out = out + rng.normal(scale=aug.noise_sigma, size=out.shape)
    if aug.dropout_rate > 0:
        keep = rng.random(size=(B, 1, D)) >= aug.dropout_rate
        out = out * keep
    return out


def augment(clip: ClipWindow, aug: AugmentationConfig, seed: int) -> ClipWindow:
    rng = np.random.default_rng(seed)
    return ClipWindow(augment_batch(clip.frames[None], aug, rng)[0], clip.source)


# ---------------------------------------------------------------- model
def positional_encoding(L: int, dim: int) -> np.ndarray:
    pos = np.arange(L)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(100.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class EncoderParams:
    """Trainable weights of the temporal encoder."""

    def __init__(self, cfg: EncoderConfig, d_obs: int, rng: np.random.Generator):
        self.cfg = cfg
        self.d_obs = d_obs
        dm = cfg.backbone_dims[-1]
        self.backbone = nk.init_mlp(rng, (d_obs,) + cfg.backbone_dims, "backbone")
        s = 1.0 / np.sqrt(dm)
        self.wq = Parameter(rng.normal(scale=s, size=(dm, dm)), "attn.q")
        self.wk = Parameter(rng.normal(scale=s, size=(dm, dm)), "attn.k")
        self.wv = Parameter(rng.normal(scale=s, size=(dm, dm)), "attn.v")
        self.head = nk.init_mlp(rng, (dm,) + cfg.temporal_dims + (cfg.d,), "head")
        self.pe = positional_encoding(cfg.L, dm)

    def parameters(self) -> List[Parameter]:
        ps = [p for layer in self.backbone for p in layer]
        ps += [self.wq, self.wk, self.wv]
        ps += [p for layer in self.head for p in layer]
        return ps

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data = np.array(state[p.name], dtype=float)
            p.zero_grad()


def encode_batch(params: EncoderParams, clips) -> Tensor:
    """(B, L, d_obs) clips -> (B, d) unit-norm embeddings (differentiable)."""
    x = clips if isinstance(clips, Tensor) else Tensor(np.asarray(clips, dtype=float))
    if x.ndim != 3 or x.shape[1] != params.cfg.L or x.shape[2] != params.d_obs:
        raise ValueError(f"expected clips of shape (B, {params.cfg.L}, {params.d_obs}), got {x.shape}")
    h = nk.mlp_forward(params.backbone, x, final_activation=True)
    h = h + params.pe
    dm = h.shape[-1]
    q = h @ params.wq
    k = h @ params.wk
    v = h @ params.wv
    h = h + nk.attention(q, k, v, tau=float(np.sqrt(dm)))
    pooled = nk.mean(h, axis=1)
    z = nk.mlp_forward(params.head, pooled)
    return nk.l2_normalize_rows(z)


def encode(params: EncoderParams, clip) -> np.ndarray:
    """Embed a single clip (ClipWindow or (L, d_obs) array)."""
    frames = clip.frames if isinstance(clip, ClipWindow) else np.asarray(clip)
    with nk.no_grad():
        return encode_batch(params, frames[None]).data[0]


def embed_episode(params: EncoderParams, frames: np.ndarray) -> np.ndarray:
    with nk.no_grad():
        return encode_batch(params, clip_array(frames, params.cfg)).data


def save_encoder(path, params: EncoderParams, extra_meta: dict | None = None) -> None:
    from dataclasses import asdict
    meta = {"kind": "encoder", "config": asdict(params.cfg), "d_obs": params.d_obs}
    meta.update(extra_meta or {})
    nk.save_checkpoint(path, params.state_dict(), meta)


def load_encoder(path) -> EncoderParams:
    arrays, meta = nk.load_checkpoint(path)
    cfg = EncoderConfig(**meta["config"])
    params = EncoderParams(cfg, int(meta["d_obs"]), np.random.default_rng(0))
    params.load_state_dict(arrays)
    return params
