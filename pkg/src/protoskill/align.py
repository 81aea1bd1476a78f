"""Skill alignment: turn a prompt demonstration into a prototype plan and
track progress through it while the robot executes.

At each step the current robot window is embedded and attends over the plan
embeddings. A monotone prior penalises plan positions far ahead of the
current progress and hard-masks positions well behind it, so the progress
estimate can only move forward.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import numkit as nk
from .encoder import EncoderConfig, EncoderParams, encode_batch, subsample_indices
from .numkit import Parameter, Tensor
from .protodisc import PrototypeBank, ProtoConfig, assign, project
from .simgen import DemoEpisode

HARD_MASK = -1e9


@dataclass
class AlignConfig:
    gamma: float = 0.5
    w: int = 3
    lead: int = 2  # plan rows read ahead of the matched position
    learned: bool = True
    proj_dim: int = 16
    cos_tau: float = 0.1  # temperature of the parameter-free fallback
    steps: int = 600
    batch: int = 256
    lr: float = 3e-3

    def __post_init__(self):
        if self.gamma < 0 or self.w < 0 or self.lead < 0:
            raise ValueError("gamma, w and lead must be >= 0")


@dataclass
class PrototypePlan:
    embeddings: np.ndarray  # (T_p, d)
    assignments: np.ndarray  # (T_p, K)
    source: str = ""

    def __post_init__(self):
        if len(self.embeddings) == 0:
            raise ValueError("empty plan")
        if len(self.embeddings) != len(self.assignments):
            raise ValueError("plan embeddings and assignments differ in length")

    @property
    def T(self) -> int:
        return len(self.embeddings)

    @property
    def rows(self) -> np.ndarray:
        """[embedding | assignment] per plan step."""
        return np.concatenate([self.embeddings, self.assignments], axis=1)

    def to_record(self) -> dict:
        return {"source": self.source, "embeddings": self.embeddings.tolist(),
                "assignments": self.assignments.tolist()}

    @classmethod
    def from_record(cls, rec: dict) -> "PrototypePlan":
        return cls(np.asarray(rec["embeddings"], float), np.asarray(rec["assignments"], float),
                   rec.get("source", ""))


@dataclass
class AlignState:
    position: float = 0.0
    last_weights: Optional[np.ndarray] = None


# ---------------------------------------------------------------- plans
def plan_frames(T: int, cfg: EncoderConfig) -> int:
    """Frames kept when windowing a prompt: its native rate, stretched to L if shorter."""
    return max(T, cfg.L)


def plan_clips(frames: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    T = len(frames)
    if T < 1:
        raise ValueError("prompt has no frames")
    m = plan_frames(T, cfg)
    sub = frames[subsample_indices(T, m)]
    starts = np.arange(0, m - cfg.L + 1, cfg.stride)
    return np.stack([sub[s:s + cfg.L] for s in starts])


def extract_plan(params: EncoderParams, bank: PrototypeBank, prompt: DemoEpisode, cfg: ProtoConfig,
                 source: str = "") -> PrototypePlan:
    """Embed and assign every clip of the prompt, in temporal order."""
    clips = plan_clips(prompt.frames, params.cfg)
    with nk.no_grad():
        Z = encode_batch(params, clips).data
        S = project(bank, Z).data
    return PrototypePlan(Z, assign(S, cfg), source)


def plan_index(t, T_robot, T_prompt: int, cfg: EncoderConfig, T_p: int) -> np.ndarray:
    """Plan clip whose last frame corresponds to robot step ``t`` under a uniform time map."""
    m = plan_frames(T_prompt, cfg)
    idx = np.round(((np.asarray(t) + 1.0) * m / np.asarray(T_robot) - cfg.L) / cfg.stride)
    return np.clip(idx, 0, T_p - 1).astype(int)


def robot_windows(history: np.ndarray, L: int) -> np.ndarray:
    """Last L frames of each history in a (B, t, d_obs) array, front-padded by repetition."""
    t = history.shape[1]
    if t >= L:
        return history[:, t - L:]
    pad = np.repeat(history[:, :1], L - t, axis=1)
    return np.concatenate([pad, history], axis=1)


# ---------------------------------------------------------------- SAM
class SAMParams:
    """Learned query/key projections and a log attention scale."""

    def __init__(self, d: int, cfg: AlignConfig, rng: np.random.Generator):
        self.cfg = cfg
        s = 1.0 / np.sqrt(d)
        self.wq = Parameter(np.eye(d, cfg.proj_dim) + 0.1 * s * rng.normal(size=(d, cfg.proj_dim)), "sam.q")
        self.wk = Parameter(np.eye(d, cfg.proj_dim) + 0.1 * s * rng.normal(size=(d, cfg.proj_dim)), "sam.k")
        self.scale = Parameter(np.array([np.log(10.0)]), "sam.log_scale")

    def parameters(self) -> List[Parameter]:
        return [self.wq, self.wk, self.scale]

    def state_dict(self):
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state) -> None:
        for p in self.parameters():
            p.data = np.array(state[p.name], dtype=float)


def monotone_bias(T_p: int, position, cfg: AlignConfig, lengths=None) -> np.ndarray:
    """Additive log-prior over plan indices for each position in a batch -> (B, T_p)."""
    pos = np.atleast_1d(np.asarray(position, dtype=float))[:, None]
    i = np.arange(T_p)[None, :]
    bias = -cfg.gamma * np.maximum(0.0, i - pos - cfg.w) ** 2
    bias = np.where(i < pos - cfg.w, HARD_MASK, bias)
    if lengths is not None:
        bias = np.where(i >= np.asarray(lengths)[:, None], HARD_MASK, bias)
    # the row of the current position always stays reachable
    keep = i == np.clip(np.floor(pos), 0, None)
    return np.where(keep, 0.0, bias)


def attention_logits(sam: Optional[SAMParams], cfg: AlignConfig, q_emb, plan_emb, bias) -> Tensor:
    """(B, d) queries against (B, T_p, d) plan embeddings -> (B, T_p) logits."""
    if cfg.learned and sam is not None:
        q = nk.matmul(nk.as_tensor(q_emb), sam.wq)  # (B, p)
        k = nk.matmul(nk.as_tensor(plan_emb), sam.wk)  # (B, T, p)
        B = q.shape[0]
        raw = nk.reshape(nk.matmul(k, nk.reshape(q, (B, -1, 1))), (B, -1))
        scale = nk.exp(sam.scale)
        return nk.add(nk.mul(raw, scale / np.sqrt(cfg.proj_dim)), bias)
    raw = np.einsum("btd,bd->bt", np.asarray(plan_emb), np.asarray(q_emb))
    return nk.as_tensor(raw / cfg.cos_tau + bias)


def readout(rows: np.ndarray, weights: np.ndarray, lengths: np.ndarray, lead: int) -> np.ndarray:
    """sum_i w_i * rows[min(i + lead, len - 1)] for padded (B, T, D) rows."""
    B, T, _ = rows.shape
    src = np.minimum(np.arange(T)[None, :] + lead, np.asarray(lengths)[:, None] - 1)
    shifted = rows[np.arange(B)[:, None], src]
    return np.einsum("bt,btd->bd", weights, shifted)


@dataclass
class PlanBatch:
    """Several plans padded to a common length."""
    embeddings: np.ndarray  # (B, T, d)
    rows: np.ndarray  # (B, T, d + K)
    lengths: np.ndarray  # (B,)

    @classmethod
    def from_plans(cls, plans: Sequence[PrototypePlan]) -> "PlanBatch":
        T = max(p.T for p in plans)
        d = plans[0].embeddings.shape[1]
        D = plans[0].rows.shape[1]
        emb = np.zeros((len(plans), T, d))
        rows = np.zeros((len(plans), T, D))
        for b, p in enumerate(plans):
            emb[b, :p.T] = p.embeddings
            rows[b, :p.T] = p.rows
            emb[b, p.T:] = p.embeddings[-1]
            rows[b, p.T:] = p.rows[-1]
        return cls(emb, rows, np.array([p.T for p in plans]))


def align_batch(plans: PlanBatch, q_emb: np.ndarray, positions: np.ndarray,
                sam: Optional[SAMParams], cfg: AlignConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One alignment step for a batch. Returns (z_hat, new positions, weights)."""
    T = plans.embeddings.shape[1]
    bias = monotone_bias(T, positions, cfg, plans.lengths)
    with nk.no_grad():
        logits = attention_logits(sam, cfg, q_emb, plans.embeddings, bias)
        weights = nk.softmax_rows(logits).data
    expected = weights @ np.arange(T)
    new_pos = np.maximum(positions, expected)
    return readout(plans.rows, weights, plans.lengths, cfg.lead), new_pos, weights


def align_step(plan: PrototypePlan, robot_window: np.ndarray, state: AlignState,
               params: EncoderParams, sam: Optional[SAMParams], cfg: AlignConfig):
    """Single-execution alignment step: returns (z_hat, new AlignState)."""
    if plan.T == 0:
        raise ValueError("empty plan")
    win = np.asarray(robot_window, dtype=float)
    if len(win) < params.cfg.L:
        win = robot_windows(win[None], params.cfg.L)[0]
    with nk.no_grad():
        q = encode_batch(params, win[None, -params.cfg.L:]).data
    z, pos, w = align_batch(PlanBatch.from_plans([plan]), q, np.array([state.position]), sam, cfg)
    assert pos[0] >= state.position
    return z[0], AlignState(float(pos[0]), w[0])


# ---------------------------------------------------------------- SAM training
@dataclass
class ReplayData:
    """Robot-to-robot replays: query windows, the plan they belong to, and the true index."""
    queries: np.ndarray  # (N, d)
    plan_id: np.ndarray  # (N,)
    target: np.ndarray  # (N,)
    prev: np.ndarray  # (N,) teacher-forced position before the step
    plans: PlanBatch


def build_replays(params: EncoderParams, bank: PrototypeBank, proto_cfg: ProtoConfig,
                  pairs: Sequence[Tuple[DemoEpisode, DemoEpisode]],
                  rest: Optional[np.ndarray] = None, extra: int = 0) -> ReplayData:
    """Replay data from (prompt, replay) episode pairs of the same script.

    Queries mimic execution: at step t the window ends at the latest of t
    observed frames. With ``rest`` (one standing frame per pair) the history
    starts from that frame and ``extra`` standing frames follow the replay.
    """
    cfg = params.cfg
    plans, qs, pid, tgt, prev = [], [], [], [], []
    for j, (prompt, replay) in enumerate(pairs):
        plan = extract_plan(params, bank, prompt, proto_cfg)
        plans.append(plan)
        T = replay.T
        if rest is None:
            hist = replay.frames
            steps = np.arange(T)
            last = steps
        else:
            hist = np.concatenate([rest[j][None], replay.frames, np.repeat(rest[j][None], extra, axis=0)])
            steps = np.arange(T + 1 + extra)
            last = np.minimum(steps - 1, T - 1)  # index of the latest replay frame seen
        wins = np.stack([robot_windows(hist[None, :t + 1], cfg.L)[0] for t in steps])
        with nk.no_grad():
            qs.append(encode_batch(params, wins).data)
        idx = np.where(last < 0, 0, plan_index(np.maximum(last, 0), T, prompt.T, cfg, plan.T))
        tgt.append(idx)
        prev.append(np.concatenate([[0], idx[:-1]]))
        pid.append(np.full(len(steps), j))
    return ReplayData(np.concatenate(qs), np.concatenate(pid), np.concatenate(tgt), np.concatenate(prev),
                      PlanBatch.from_plans(plans))


def sam_loss(sam: SAMParams, cfg: AlignConfig, data: ReplayData, idx: np.ndarray) -> Tensor:
    T = data.plans.embeddings.shape[1]
    pid = data.plan_id[idx]
    bias = monotone_bias(T, data.prev[idx], cfg, data.plans.lengths[pid])
    logits = attention_logits(sam, cfg, data.queries[idx], data.plans.embeddings[pid], bias)
    logp = nk.log_softmax_rows(logits)
    onehot = np.zeros((len(idx), T))
    onehot[np.arange(len(idx)), data.target[idx]] = 1.0
    return nk.cross_entropy(onehot, logp)


def train_sam(data: ReplayData, cfg: AlignConfig, seed: int, d: int) -> Tuple[SAMParams, List[float]]:
    rng = np.random.default_rng([seed, 4242])
    sam = SAMParams(d, cfg, rng)
    if not cfg.learned:
        return sam, []
    opt = nk.Adam(sam.parameters(), lr=cfg.lr)
    curve = []
    for step in range(cfg.steps):
        idx = rng.integers(len(data.target), size=min(cfg.batch, len(data.target)))
        loss = sam_loss(sam, cfg, data, idx)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"SAM training diverged at step {step}")
        nk.backward(loss)
        opt.step()
        curve.append(loss.item())
    return sam, curve


def save_sam(path, sam: SAMParams, extra_meta: dict | None = None) -> None:
    meta = {"kind": "sam", "config": asdict(sam.cfg), "d": int(sam.wq.shape[0])}
    meta.update(extra_meta or {})
    nk.save_checkpoint(path, sam.state_dict(), meta)


def load_sam(path) -> SAMParams:
    arrays, meta = nk.load_checkpoint(path)
    cfg = AlignConfig(**meta["config"])
    sam = SAMParams(int(meta["d"]), cfg, np.random.default_rng(0))
    sam.load_state_dict(arrays)
    return sam


# ---------------------------------------------------------------- traces
def trace_csv(rows: Sequence[Tuple[int, float, np.ndarray]]) -> str:
    """CSV of (step, position, top-3 plan indices and weights)."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["step", "position", "idx1", "w1", "idx2", "w2", "idx3", "w3"])
    for step, pos, weights in rows:
        order = np.argsort(-weights, kind="stable")[:3]
        cells = []
        for i in range(3):
            if i < len(order):
                cells += [int(order[i]), f"{weights[order[i]]:.6f}"]
            else:
                cells += ["", ""]
        wr.writerow([step, f"{pos:.6f}"] + cells)
    return buf.getvalue()


def write_plan(path, plan: PrototypePlan, prompt: Optional[DemoEpisode] = None) -> None:
    from .simgen import episode_record
    rec = episode_record(prompt) if prompt is not None else {}
    rec["assignments"] = plan.assignments.tolist()
    rec["embeddings"] = plan.embeddings.tolist()
    rec["plan_source"] = plan.source
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_plan(path) -> PrototypePlan:
    with open(path, encoding="utf-8") as fh:
        rec = json.loads(fh.readline())
    return PrototypePlan(np.asarray(rec["embeddings"], float), np.asarray(rec["assignments"], float),
                         rec.get("plan_source", ""))
