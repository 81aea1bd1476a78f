"""Prototype discovery: compositional soft assignment, self-supervised training,
and entropy-driven choice of the number of prototypes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from . import numkit as nk
from .encoder import (AugmentationConfig, EncoderConfig, EncoderParams, clip_array, augment_batch,
                      encode_batch)
from .numkit import Parameter, Tensor

log = logging.getLogger(__name__)

ASSIGN_MODES = ("soft", "sinkhorn")


@dataclass
class ProtoConfig:
    K: int = 32
    tau: float = 0.1
    theta: Optional[float] = None  # None -> 0.01 * log(k_min) / k_min
    delta_k: int = 8
    k_min: int = 8
    k_max: int = 64
    lambda_temporal: float = 1.0
    lambda_ent: float = 0.3
    delta: int = 1
    tau_tcn: float = 0.1
    # temperature of the (detached) soft targets; None uses tau
    tau_target: Optional[float] = 0.05
    # training loop
    steps: int = 400
    lr: float = 3e-3
    episodes_per_batch: int = 6
    prelim_fraction: float = 0.2
    assign: str = "soft"
    sinkhorn_iters: int = 3
    sinkhorn_tau: float = 0.05
    entropy: str = "normalized"  # or "raw" (no 1/K prefactor)
    augment: AugmentationConfig = field(default_factory=lambda: AugmentationConfig(
        noise_sigma=0.05, mix_sigma=0.15, offset_sigma=0.15))

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentationConfig(**self.augment)
        if (self.k_min > self.k_max or self.delta_k < 1 or self.tau <= 0 or self.tau_tcn <= 0
                or (self.tau_target is not None and self.tau_target <= 0)):
            raise ValueError(f"invalid prototype config: {self}")
        if self.assign not in ASSIGN_MODES:
            raise ValueError(f"assign must be one of {ASSIGN_MODES}")

    @property
    def threshold(self) -> float:
        if self.theta is not None:
            return self.theta
        return 0.01 * np.log(self.k_min) / self.k_min


class PrototypeBank:
    """d x K matrix of unit-norm prototype columns."""

    def __init__(self, C: np.ndarray, normalize: bool = True):
        self.C = Parameter(C, "prototypes")
        if normalize:
            self.renormalize()

    @classmethod
    def random(cls, d: int, K: int, rng: np.random.Generator) -> "PrototypeBank":
        return cls(rng.normal(size=(d, K)))

    @property
    def K(self) -> int:
        return self.C.shape[1]

    @property
    def d(self) -> int:
        return self.C.shape[0]

    def renormalize(self) -> None:
        self.C.data = self.C.data / np.linalg.norm(self.C.data, axis=0, keepdims=True)


# ---------------------------------------------------------------- assignment ops
def project(C, Z) -> Tensor:
    """Scores of B embeddings (rows of ``Z``) against the prototype columns of ``C``."""
    C = C.C if isinstance(C, PrototypeBank) else C
    Z, C = nk.as_tensor(Z), nk.as_tensor(C)
    if Z.shape[-1] != C.shape[0]:
        raise ValueError(f"embedding dim {Z.shape[-1]} does not match prototype dim {C.shape[0]}")
    return nk.matmul(Z, C)


def soft_assign(S, tau: float) -> Tensor:
    """Row-normalised ``exp(S / tau)``: each row a distribution, columns unconstrained."""
    return nk.softmax_rows(S, tau)


def sinkhorn_assign(S, tau: float, iters: int) -> np.ndarray:
    """Alternate column (to B/K) and row (to 1) scaling of ``exp(S / tau)``.

    Works in the log domain. Returns the row-normalised last iterate; no
    gradient flows through it.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    S = S.data if isinstance(S, Tensor) else np.asarray(S, dtype=float)
    B, K = S.shape
    logp = S / tau
    log_col_target = np.log(B / K)
    for _ in range(iters):
        logp = logp - logsumexp(logp, axis=0, keepdims=True) + log_col_target
        logp = logp - logsumexp(logp, axis=1, keepdims=True)
    return np.exp(logp)


def assign(S, cfg: ProtoConfig) -> np.ndarray:
    """Inference-time assignment matrix under the configured mode."""
    if cfg.assign == "sinkhorn":
        return sinkhorn_assign(S, cfg.sinkhorn_tau, cfg.sinkhorn_iters)
    with nk.no_grad():
        return soft_assign(S, cfg.tau).data


def proto_loss(Q1, P2) -> Tensor:
    """Cross-entropy of view-2 predictions against (constant) view-1 targets, batch mean.

    Entries where the target is zero contribute nothing, so one-hot
    predictions are allowed there.
    """
    Q1 = Q1.data if isinstance(Q1, Tensor) else np.asarray(Q1, dtype=float)
    P2 = nk.as_tensor(P2)
    if Q1.shape != P2.shape:
        raise ValueError(f"shape mismatch {Q1.shape} vs {P2.shape}")
    safe = nk.add(P2, ((Q1 == 0) & (P2.data <= 0)).astype(float))
    return nk.cross_entropy(Q1, nk.log(safe))


def swapped_proto_loss(Q1, logP1: Tensor, Q2, logP2: Tensor) -> Tensor:
    """Symmetrised swapped prediction from log-probabilities (training form)."""
    Q1 = Q1.data if isinstance(Q1, Tensor) else Q1
    Q2 = Q2.data if isinstance(Q2, Tensor) else Q2
    return 0.5 * (nk.cross_entropy(Q1, logP2) + nk.cross_entropy(Q2, logP1))


def temporal_loss(Z_seq, delta: int, tau_tcn: float) -> Tensor:
    """Time-contrastive InfoNCE: ``z_i`` should pick out ``z_{i+delta}`` among all other clips.

    ``Z_seq`` is (N, d) or (E, N, d) for E independent sequences (losses averaged).
    """
    Z = nk.as_tensor(Z_seq)
    N = Z.shape[-2]
    if N <= delta or N < 2:
        raise ValueError(f"sequence of {N} clips too short for delta={delta}")
    Zn = nk.l2_normalize_rows(Z)
    sims = nk.matmul(Zn, nk.transpose(Zn))
    self_mask = np.where(np.eye(N, dtype=bool), -1e9, 0.0)
    logp = nk.log_softmax_rows(nk.add(nk.mul(sims, 1.0 / tau_tcn), self_mask))
    rows = np.arange(N - delta)
    pick = np.zeros((N, N))
    pick[rows, rows + delta] = 1.0
    per = nk.sum(nk.mul(logp, pick), axis=-1)  # (..., N); zero for rows without a positive
    count = (N - delta) * (int(np.prod(Z.shape[:-2])) if Z.ndim > 2 else 1)
    return nk.mul(nk.sum(per), -1.0 / count)


def column_means(Q: np.ndarray) -> np.ndarray:
    return np.asarray(Q, dtype=float).mean(axis=0)


def assignment_entropy(Q, normalized: bool = True) -> float:
    """``-(1/K) sum_k pbar_k log pbar_k`` with ``pbar`` the column means of ``Q``."""
    Q = Q.data if isinstance(Q, Tensor) else np.asarray(Q, dtype=float)
    p = column_means(Q)
    nz = p > 0
    h = float(-(p[nz] * np.log(p[nz])).sum())
    return h / Q.shape[1] if normalized else h


# ---------------------------------------------------------------- training
@dataclass
class TrainLog:
    steps: List[int] = field(default_factory=list)
    loss: List[float] = field(default_factory=list)
    proto: List[float] = field(default_factory=list)
    temporal: List[float] = field(default_factory=list)
    entropy: List[float] = field(default_factory=list)


def dataset_clips(episodes, enc_cfg: EncoderConfig) -> np.ndarray:
    """(n_episodes, n_clips, L, d_obs) stacked clip windows."""
    return np.stack([clip_array(ep.frames, enc_cfg) for ep in episodes])


def train_prototypes(episodes, cfg: ProtoConfig, enc_cfg: EncoderConfig, seed: int,
                     steps: Optional[int] = None, clips: Optional[np.ndarray] = None,
                     log_every: int = 50) -> Tuple[EncoderParams, PrototypeBank, TrainLog]:
    """Jointly train the encoder and prototypes on unlabeled clips."""
    if clips is None and not episodes:
        raise ValueError("empty dataset")
    clips = dataset_clips(episodes, enc_cfg) if clips is None else clips
    n_ep, n_clips, L, d_obs = clips.shape
    # separate streams so runs that differ only in K share the encoder init, the
    # first K prototype columns, and every batch and augmentation draw
    params = EncoderParams(enc_cfg, d_obs, np.random.default_rng([seed, 2718]))
    bank = PrototypeBank(np.random.default_rng([seed, 2719]).normal(size=(cfg.K, enc_cfg.d)).T)
    rng = np.random.default_rng([seed, 2720])
    opt = nk.Adam(params.parameters() + [bank.C], lr=cfg.lr)
    steps = cfg.steps if steps is None else steps
    E = min(cfg.episodes_per_batch, n_ep)
    history = TrainLog()
    window: List[Tuple[float, float, float]] = []
    probe = clips[rng.choice(n_ep, size=min(n_ep, 16), replace=False)].reshape(-1, L, d_obs)

    for step in range(steps):
        lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step / max(1, steps)))
        opt.set_lr(lr)
        pick = rng.choice(n_ep, size=E, replace=False)
        x = clips[pick].reshape(E * n_clips, L, d_obs)
        v1 = augment_batch(x, cfg.augment, rng)
        v2 = augment_batch(x, cfg.augment, rng)
        z1 = encode_batch(params, v1)
        z2 = encode_batch(params, v2)
        s1 = project(bank, z1)
        s2 = project(bank, z2)
        logp1 = nk.log_softmax_rows(s1, cfg.tau)
        logp2 = nk.log_softmax_rows(s2, cfg.tau)
        if cfg.assign == "sinkhorn":
            q1 = sinkhorn_assign(s1.data, cfg.sinkhorn_tau, cfg.sinkhorn_iters)
            q2 = sinkhorn_assign(s2.data, cfg.sinkhorn_tau, cfg.sinkhorn_iters)
        else:
            tt = cfg.tau if cfg.tau_target is None else cfg.tau_target
            with nk.no_grad():
                q1 = soft_assign(s1.data, tt).data
                q2 = soft_assign(s2.data, tt).data
        l_proto = swapped_proto_loss(q1, logp1, q2, logp2)
        total = l_proto
        l_temp = None
        if cfg.lambda_temporal > 0:
            l_temp = temporal_loss(nk.reshape(z1, (E, n_clips, enc_cfg.d)), cfg.delta, cfg.tau_tcn)
            total = total + cfg.lambda_temporal * l_temp
        if cfg.lambda_ent > 0:
            pbar = 0.5 * (nk.mean(nk.exp(logp1), axis=0) + nk.mean(nk.exp(logp2), axis=0))
            neg_h = nk.sum(nk.mul(pbar, nk.log(pbar)))
            total = total + cfg.lambda_ent * neg_h
        if not np.isfinite(total.data):
            raise FloatingPointError(f"prototype training diverged at step {step}: loss={total.data}")
        nk.backward(total)
        opt.step()
        bank.renormalize()
        window.append((total.item(), l_proto.item(), 0.0 if l_temp is None else l_temp.item()))
        if (step + 1) % log_every == 0 or step == steps - 1:
            arr = np.array(window)
            history.steps.append(step + 1)
            history.loss.append(float(arr[:, 0].mean()))
            history.proto.append(float(arr[:, 1].mean()))
            history.temporal.append(float(arr[:, 2].mean()))
            history.entropy.append(dataset_entropy(params, bank, probe, cfg))
            window = []
    return params, bank, history


def embed_clips(params: EncoderParams, clips: np.ndarray, chunk: int = 2048) -> np.ndarray:
    flat = clips.reshape(-1, *clips.shape[-2:])
    with nk.no_grad():
        out = [encode_batch(params, flat[i:i + chunk]).data for i in range(0, len(flat), chunk)]
    return np.concatenate(out).reshape(*clips.shape[:-2], -1)


def dataset_entropy(params: EncoderParams, bank: PrototypeBank, clips: np.ndarray, cfg: ProtoConfig) -> float:
    Z = embed_clips(params, clips).reshape(-1, bank.d)
    with nk.no_grad():
        Q = soft_assign(project(bank, Z), cfg.tau).data
    return assignment_entropy(Q, normalized=cfg.entropy == "normalized")


# ---------------------------------------------------------------- adaptive K
@dataclass
class SelectionTrace:
    entries: List[Tuple[int, float, Optional[float]]]
    chosen: int

    def to_csv(self) -> str:
        lines = ["K,H,dH,chosen"]
        for K, H, dH in self.entries:
            dh = "" if dH is None else repr(float(dH))
            lines.append(f"{K},{float(H)!r},{dh},{int(K == self.chosen)}")
        return "\n".join(lines) + "\n"


def k_grid(cfg: ProtoConfig) -> List[int]:
    return list(range(cfg.k_min, cfg.k_max + 1, cfg.delta_k))


def select_k(episodes, cfg: ProtoConfig, enc_cfg: EncoderConfig, seed: int,
             entropy_fn: Optional[Callable[[int], float]] = None) -> SelectionTrace:
    """Scan K upward; stop at the first K whose forward entropy change is below threshold.

    Each grid point gets a short preliminary training (``prelim_fraction`` of
    the full budget). ``entropy_fn`` overrides training with a callable K -> H
    (used by tests to exercise the rule in isolation).
    """
    grid = k_grid(cfg)
    if len(grid) < 2:
        raise ValueError(f"K grid {grid} needs at least two points (k_min + delta_k <= k_max)")
    theta = cfg.threshold
    if entropy_fn is None:
        clips = dataset_clips(episodes, enc_cfg)
        prelim = max(1, int(round(cfg.prelim_fraction * cfg.steps)))

        def entropy_fn(K: int) -> float:
            kcfg = _with(cfg, K=K)
            params, bank, _ = train_prototypes(episodes, kcfg, enc_cfg,
                                               seed, steps=prelim, clips=clips, log_every=prelim + 1)
            return dataset_entropy(params, bank, clips, kcfg)

    entries: List[Tuple[int, float, Optional[float]]] = []
    H_prev = entropy_fn(grid[0])
    chosen = grid[-1]
    for i, K in enumerate(grid[:-1]):
        H_next = entropy_fn(grid[i + 1])
        dH = abs(H_next - H_prev)
        entries.append((K, H_prev, dH))
        log.info("select_k K=%d H=%.5f dH=%.5f", K, H_prev, dH)
        H_prev = H_next
        if dH < theta:
            chosen = K
            break
    else:
        entries.append((grid[-1], H_prev, None))
    return SelectionTrace(entries, chosen)


def _with(cfg: ProtoConfig, **kw) -> ProtoConfig:
    d = asdict(cfg)
    d.update(kw)
    return ProtoConfig(**d)


def save_prototypes(path, bank: PrototypeBank, cfg: ProtoConfig, extra_meta: dict | None = None) -> None:
    meta = {"kind": "prototypes", "K": bank.K, "d": bank.d, "tau": cfg.tau, "assign": cfg.assign,
            "sinkhorn_tau": cfg.sinkhorn_tau, "sinkhorn_iters": cfg.sinkhorn_iters}
    meta.update(extra_meta or {})
    nk.save_checkpoint(path, {"C": bank.C.data}, meta)


def load_prototypes(path) -> Tuple[PrototypeBank, dict]:
    arrays, meta = nk.load_checkpoint(path)
    return PrototypeBank(arrays["C"], normalize=False), meta
