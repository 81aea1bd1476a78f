"""Prototype-conditioned diffusion policy over short action chunks.

The denoiser is an MLP over ``[noisy chunk, step embedding, state, z]`` that
predicts the injected noise. Sampling is ancestral with the posterior
variance.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import numkit as nk
from .numkit import Parameter, Tensor

log = logging.getLogger(__name__)


@dataclass
class NoiseSchedule:
    H: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.2

    def __post_init__(self):
        if self.H < 1:
            raise ValueError("H must be >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")

    @property
    def betas(self) -> np.ndarray:
        if self.H == 1:
            return np.array([self.beta_end])
        return np.linspace(self.beta_start, self.beta_end, self.H)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)


def forward_diffuse(a0, h, schedule: NoiseSchedule, noise) -> np.ndarray:
    """Closed-form ``a_h = sqrt(abar_h) a0 + sqrt(1 - abar_h) noise`` (h is 1-based)."""
    h_arr = np.asarray(h)
    if np.any(h_arr < 1) or np.any(h_arr > schedule.H):
        raise ValueError(f"diffusion step must be in [1, {schedule.H}], got {h}")
    ab = schedule.alpha_bars[h_arr - 1]
    a0, noise = np.asarray(a0, dtype=float), np.asarray(noise, dtype=float)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (a0.ndim - ab.ndim))
    return np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * noise


def step_embedding(h, dim: int, H: int) -> np.ndarray:
    """Sinusoidal embedding of (1-based) diffusion steps; shape (len(h), dim)."""
    h = np.atleast_1d(np.asarray(h, dtype=float)) / max(H, 1)
    freqs = np.exp(np.linspace(0.0, np.log(100.0), dim // 2))
    ang = h[:, None] * freqs[None, :] * np.pi
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class PolicyConfig:
    T_a: int = 4
    execute: int = 2
    hidden: Tuple[int, ...] = (256, 256)
    t_dim: int = 16
    steps: int = 4000
    batch: int = 256
    lr: float = 2e-3
    clip_x0: bool = True  # keep the implied clean chunk inside the training range while sampling
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = NoiseSchedule(**self.schedule)
        self.hidden = tuple(self.hidden)
        if self.T_a < 1 or not 1 <= self.execute <= self.T_a:
            raise ValueError("need T_a >= 1 and 1 <= execute <= T_a")


@dataclass
class PolicyDataset:
    s: np.ndarray  # (N, d_s)
    z: np.ndarray  # (N, d_z)
    a: np.ndarray  # (N, T_a, d_a)

    def __post_init__(self):
        if not len(self.s) == len(self.z) == len(self.a):
            raise ValueError("s, z, a must have equal length")
        if len(self.s) == 0:
            raise ValueError("empty policy dataset")

    def __len__(self) -> int:
        return len(self.s)


class PolicyCheckpoint:
    """Denoiser weights, normalisation statistics and the noise schedule."""

    def __init__(self, cfg: PolicyConfig, d_s: int, d_z: int, d_a: int, rng: np.random.Generator):
        self.cfg = cfg
        self.d_s, self.d_z, self.d_a = d_s, d_z, d_a
        d_in = cfg.T_a * d_a + cfg.t_dim + d_s + d_z
        self.net = nk.init_mlp(rng, (d_in,) + cfg.hidden + (cfg.T_a * d_a,), "denoiser")
        self.a_mean = np.zeros(d_a)
        self.a_std = np.ones(d_a)
        self.s_mean = np.zeros(d_s)
        self.s_std = np.ones(d_s)
        self.z_mean = np.zeros(d_z)
        self.z_std = np.ones(d_z)
        # per-coordinate range of normalised training chunks
        self.a_lo = np.full(d_a, -np.inf)
        self.a_hi = np.full(d_a, np.inf)

    @property
    def schedule(self) -> NoiseSchedule:
        return self.cfg.schedule

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.net for p in layer]

    def norm_s(self, s: np.ndarray) -> np.ndarray:
        return (np.asarray(s, dtype=float) - self.s_mean) / self.s_std

    def norm_z(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z, dtype=float) - self.z_mean) / self.z_std

    def norm_a(self, a: np.ndarray) -> np.ndarray:
        return (np.asarray(a, dtype=float) - self.a_mean) / self.a_std

    def denorm_a(self, a: np.ndarray) -> np.ndarray:
        return a * self.a_std + self.a_mean

    def state_dict(self):
        d = {p.name: p.data for p in self.parameters()}
        d.update({"a_mean": self.a_mean, "a_std": self.a_std, "s_mean": self.s_mean, "s_std": self.s_std,
                  "z_mean": self.z_mean, "z_std": self.z_std, "a_lo": self.a_lo, "a_hi": self.a_hi})
        return d

    def load_state_dict(self, state) -> None:
        for p in self.parameters():
            p.data = np.array(state[p.name], dtype=float)
        for k in ("a_mean", "a_std", "s_mean", "s_std", "z_mean", "z_std", "a_lo", "a_hi"):
            setattr(self, k, np.array(state[k], dtype=float))


def predict_noise(ckpt: PolicyCheckpoint, a_h, h, s_n, z_n) -> Tensor:
    """eps_theta on normalised inputs (``s_n``, ``z_n``); ``a_h`` is (B, T_a, d_a), ``h`` (B,) 1-based steps."""
    B = len(s_n)
    a_flat = nk.reshape(nk.as_tensor(a_h), (B, -1))
    cond = np.concatenate([step_embedding(h, ckpt.cfg.t_dim, ckpt.schedule.H), s_n, z_n], axis=1)
    x = nk.concat([a_flat, cond], axis=1)
    out = nk.mlp_forward(ckpt.net, x)
    return nk.reshape(out, (B, ckpt.cfg.T_a, ckpt.d_a))


def diffusion_loss(ckpt: PolicyCheckpoint, a0_n, s_n, z_n, h, eps) -> Tensor:
    """Mean squared error between injected and predicted noise (per coordinate)."""
    a_h = forward_diffuse(a0_n, h, ckpt.schedule, eps)
    pred = predict_noise(ckpt, a_h, h, s_n, z_n)
    return nk.mean(nk.square(nk.sub(pred, eps)))


def train_policy(data: PolicyDataset, cfg: PolicyConfig, seed: int,
                 steps: Optional[int] = None, log_every: int = 100) -> Tuple[PolicyCheckpoint, List[float]]:
    """Fit the denoiser by noise prediction; returns the checkpoint and a loss curve."""
    rng = np.random.default_rng([seed, 31415])
    d_a = data.a.shape[2]
    if data.a.shape[1] != cfg.T_a:
        raise ValueError(f"chunks have length {data.a.shape[1]}, config expects T_a={cfg.T_a}")
    ckpt = PolicyCheckpoint(cfg, data.s.shape[1], data.z.shape[1], d_a, rng)
    flat_a = data.a.reshape(-1, d_a)
    ckpt.a_mean, ckpt.a_std = flat_a.mean(0), flat_a.std(0) + 1e-6
    ckpt.s_mean, ckpt.s_std = data.s.mean(0), data.s.std(0) + 1e-6
    ckpt.z_mean, ckpt.z_std = data.z.mean(0), data.z.std(0) + 1e-3
    a_n = ckpt.norm_a(data.a)
    ckpt.a_lo, ckpt.a_hi = a_n.min(axis=(0, 1)), a_n.max(axis=(0, 1))
    s_n = ckpt.norm_s(data.s)
    z_n = ckpt.norm_z(data.z)
    opt = nk.Adam(ckpt.parameters(), lr=cfg.lr)
    steps = cfg.steps if steps is None else steps
    curve: List[float] = []
    acc = []
    for step in range(steps):
        opt.set_lr(cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step / max(1, steps))))
        idx = rng.integers(len(data), size=min(cfg.batch, len(data)))
        h = rng.integers(1, cfg.schedule.H + 1, size=len(idx))
        eps = rng.normal(size=a_n[idx].shape)
        loss = diffusion_loss(ckpt, a_n[idx], s_n[idx], z_n[idx], h, eps)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"policy training diverged at step {step}: loss={loss.data}")
        nk.backward(loss)
        opt.step()
        acc.append(loss.item())
        if (step + 1) % log_every == 0 or step == steps - 1:
            curve.append(float(np.mean(acc)))
            acc = []
    return ckpt, curve


def sample_action(ckpt: PolicyCheckpoint, s, z, seed=None, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Ancestral sampling from the prior down to a clean chunk.

    ``s`` and ``z`` may be single vectors (returns (T_a, d_a)) or batches
    (returns (B, T_a, d_a)). Pass either ``seed`` or a generator. With
    ``clip_x0`` each step forms the posterior mean from the implied clean
    chunk after clipping it to the training range; otherwise the plain
    epsilon form is used. Both give the same mean when nothing is clipped.
    """
    s = np.asarray(s, dtype=float)
    z = np.asarray(z, dtype=float)
    single = s.ndim == 1
    if single:
        s, z = s[None], z[None]
    if s.shape[1] != ckpt.d_s or z.shape[1] != ckpt.d_z:
        raise ValueError(f"expected s dim {ckpt.d_s} and z dim {ckpt.d_z}, got {s.shape[1]}, {z.shape[1]}")
    rng = np.random.default_rng(seed) if rng is None else rng
    sch = ckpt.schedule
    betas, alphas, abar = sch.betas, sch.alphas, sch.alpha_bars
    B = len(s)
    s_n = ckpt.norm_s(s)
    z_n = ckpt.norm_z(z)
    x = rng.normal(size=(B, ckpt.cfg.T_a, ckpt.d_a))
    with nk.no_grad():
        for h in range(sch.H, 0, -1):
            eps = predict_noise(ckpt, x, np.full(B, h), s_n, z_n).data
            i = h - 1
            if ckpt.cfg.clip_x0:
                x0 = np.clip((x - np.sqrt(1.0 - abar[i]) * eps) / np.sqrt(abar[i]), ckpt.a_lo, ckpt.a_hi)
                prev = abar[i - 1] if h > 1 else 1.0
                mean = (np.sqrt(prev) * betas[i] * x0 + np.sqrt(alphas[i]) * (1.0 - prev) * x) / (1.0 - abar[i])
            else:
                mean = (x - betas[i] / np.sqrt(1.0 - abar[i]) * eps) / np.sqrt(alphas[i])
            if h > 1:
                var = betas[i] * (1.0 - abar[i - 1]) / (1.0 - abar[i])
                x = mean + np.sqrt(var) * rng.normal(size=x.shape)
            else:
                x = mean
    out = ckpt.denorm_a(x)
    return out[0] if single else out


def save_policy(path, ckpt: PolicyCheckpoint, extra_meta: dict | None = None) -> None:
    meta = {"kind": "policy", "config": asdict(ckpt.cfg), "d_s": ckpt.d_s, "d_z": ckpt.d_z, "d_a": ckpt.d_a}
    meta.update(extra_meta or {})
    nk.save_checkpoint(path, ckpt.state_dict(), meta)


def load_policy(path) -> PolicyCheckpoint:
    arrays, meta = nk.load_checkpoint(path)
    cfg = PolicyConfig(**meta["config"])
    ckpt = PolicyCheckpoint(cfg, int(meta["d_s"]), int(meta["d_z"]), int(meta["d_a"]), np.random.default_rng(0))
    ckpt.load_state_dict(arrays)
    return ckpt
