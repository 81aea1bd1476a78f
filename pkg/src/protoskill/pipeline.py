"""End-to-end experiment harness: data, training per variant, one-shot evaluation, reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numkit as nk
from .align import (AlignConfig, PlanBatch, SAMParams, align_batch, build_replays, extract_plan,
                    load_sam, plan_index, readout, robot_windows, save_sam, trace_csv, train_sam)
from .config import RunConfig
from .encoder import EncoderParams, encode_batch, load_encoder, save_encoder, subsample_indices
from .policy import (PolicyCheckpoint, PolicyDataset, load_policy, sample_action, save_policy,
                     train_policy)
from .protodisc import (PrototypeBank, ProtoConfig, SelectionTrace, _with, assign, dataset_clips,
                        embed_clips, load_prototypes, project, save_prototypes, select_k,
                        train_prototypes)
from .simgen import (DemoEpisode, RolloutEnv, TaskScript, World, make_task, make_world, read_episodes,
                     render_episode, rest_frame, script_length, success_check, write_episodes)

log = logging.getLogger(__name__)

VARIANTS = ("full", "sinkhorn-assign", "fixed-K", "no-align", "no-temporal", "gcd-baseline")
SPLITS = ("human_train", "robot_train", "human_test", "robot_test")


# ---------------------------------------------------------------- data
@dataclass
class SeedData:
    seed: int
    world: World
    episodes: Dict[str, List[DemoEpisode]]

    def train(self) -> List[DemoEpisode]:
        return self.episodes["human_train"] + self.episodes["robot_train"]


def _draw_scripts(cat: str, n: int, base: int, taken: set, vocab: int = 10,
                  reserved: frozenset = frozenset()) -> List[TaskScript]:
    """Draw ``n`` scripts not in ``taken``. When the category runs out of novel
    compositions, repeats are allowed as long as they avoid ``reserved``."""
    out, i = [], 0
    while len(out) < n:
        s = make_task(cat, base + i, vocab=vocab)
        i += 1
        exhausted = i > 20 * n + 200
        if s.primitives in taken and not (exhausted and s.primitives not in reserved):
            if i > 200 * n + 2000:
                raise RuntimeError(f"cannot draw {n} {cat} scripts")
            continue
        taken.add(s.primitives)
        out.append(s)
    return out


def split_scripts(cfg: RunConfig, seed: int) -> Dict[str, Dict[str, List[TaskScript]]]:
    """Disjoint script sets: human training, robot training (unpaired), held-out test."""
    out = {"human": {}, "robot": {}, "test": {}}
    for c, cat in enumerate(cfg.data.categories):
        taken: set = set()
        base = 1_000_000 * (seed + 1) + 10_000 * c
        # test scripts first so they are always novel compositions
        out["test"][cat] = _draw_scripts(cat, cfg.data.test_scripts, base, taken)
        test = frozenset(s.primitives for s in out["test"][cat])
        out["human"][cat] = _draw_scripts(cat, cfg.data.train_scripts, base + 3000, taken, reserved=test)
        out["robot"][cat] = _draw_scripts(cat, cfg.data.train_scripts, base + 6000, taken, reserved=test)
    return out


def generate(cfg: RunConfig, seed: int) -> SeedData:
    world = make_world(seed, cfg.sim)
    scripts = split_scripts(cfg, seed)
    eps: Dict[str, List[DemoEpisode]] = {k: [] for k in SPLITS}
    plan = [("human_train", "human", "human"), ("robot_train", "robot", "robot"),
            ("human_test", "test", "human"), ("robot_test", "test", "robot")]
    for split, pool, emb in plan:
        for cat in cfg.data.categories:
            for i, script in enumerate(scripts[pool][cat]):
                for speed in cfg.data.speeds:
                    ep_seed = hash_seed(seed, split, cat, i)
                    ep = render_episode(script, world, emb, speed, ep_seed)
                    ep.meta.update({"seed": seed, "split": split, "script_index": i})
                    eps[split].append(ep)
    return SeedData(seed, world, eps)


def hash_seed(*parts) -> int:
    """Stable integer seed from a tuple of values (independent of PYTHONHASHSEED)."""
    import hashlib
    h = hashlib.sha256(json.dumps(parts, separators=(",", ":")).encode()).digest()
    return int.from_bytes(h[:4], "little")


def data_paths(cfg: RunConfig, seed: int, root: Optional[str] = None) -> Dict[str, Path]:
    base = Path(root or cfg.paths.data_dir) / f"seed{seed}"
    return {split: base / f"{split}.jsonl" for split in SPLITS}


def gen_data(cfg: RunConfig, out_dir: Optional[str] = None, seeds: Optional[Sequence[int]] = None) -> Dict[str, int]:
    """Write every split for every seed; returns episode counts per split."""
    counts = {k: 0 for k in SPLITS}
    for seed in (cfg.eval.seeds if seeds is None else seeds):
        sd = generate(cfg, seed)
        for split, path in data_paths(cfg, seed, out_dir).items():
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                counts[split] += write_episodes(path, sd.episodes[split])
            except OSError as e:
                raise OSError(f"cannot write {path}: {e.strerror}") from None
    return counts


def load_seed_data(cfg: RunConfig, seed: int, root: Optional[str] = None) -> SeedData:
    """Read a generated dataset if present, otherwise generate it in memory."""
    paths = data_paths(cfg, seed, root)
    if all(p.exists() for p in paths.values()):
        return SeedData(seed, make_world(seed, cfg.sim), {s: read_episodes(p) for s, p in paths.items()})
    return generate(cfg, seed)


def kselect_datasets(cfg: RunConfig, seed: int) -> Tuple[List[DemoEpisode], List[DemoEpisode]]:
    """A small-vocabulary simple dataset and a full-vocabulary complex dataset."""
    world = make_world(seed, cfg.sim)
    n = cfg.data.kselect_scripts
    out = []
    for cat, vocab in (("simple", cfg.data.kselect_simple_vocab), ("complex", cfg.sim.G)):
        eps = []
        for i in range(n):
            s = make_task(cat, 5_000_000 + 10_000 * seed + i, vocab=vocab)
            for emb in ("human", "robot"):
                for speed in cfg.data.speeds:
                    eps.append(render_episode(s, world, emb, speed, hash_seed(seed, "k", cat, i)))
        out.append(eps)
    return out[0], out[1]


# ---------------------------------------------------------------- observation scaling
@dataclass
class ObsNorm:
    """Per-embodiment channel standardisation fitted on that embodiment's training frames.

    Each embodiment is scaled with its own statistics only, so no pairing
    between human and robot data is implied.
    """
    stats: Dict[str, Tuple[np.ndarray, np.ndarray]]

    @classmethod
    def fit(cls, data: SeedData) -> "ObsNorm":
        stats = {}
        for emb in ("human", "robot"):
            frames = np.concatenate([e.frames for e in data.episodes[f"{emb}_train"]])
            stats[emb] = (frames.mean(axis=0), frames.std(axis=0) + 1e-6)
        return cls(stats)

    @classmethod
    def identity(cls, d_obs: int) -> "ObsNorm":
        return cls({emb: (np.zeros(d_obs), np.ones(d_obs)) for emb in ("human", "robot")})

    def __call__(self, frames: np.ndarray, embodiment: str) -> np.ndarray:
        mean, std = self.stats[embodiment]
        return (np.asarray(frames, dtype=float) - mean) / std

    def episodes(self, eps: Sequence[DemoEpisode]) -> List[DemoEpisode]:
        return [replace(e, frames=self(e.frames, e.embodiment)) for e in eps]

    def apply(self, data: SeedData) -> SeedData:
        return SeedData(data.seed, data.world, {k: self.episodes(v) for k, v in data.episodes.items()})

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {}
        for emb, (m, s) in self.stats.items():
            out[f"{emb}.mean"], out[f"{emb}.std"] = m, s
        return out

    @classmethod
    def from_state(cls, state) -> "ObsNorm":
        embs = sorted({k.split(".")[0] for k in state})
        return cls({e: (np.asarray(state[f"{e}.mean"]), np.asarray(state[f"{e}.std"])) for e in embs})


# ---------------------------------------------------------------- variants
@dataclass
class Artifacts:
    variant: str
    seed: int
    encoder: EncoderParams
    bank: PrototypeBank
    proto_cfg: ProtoConfig
    sam: SAMParams
    policy: PolicyCheckpoint
    align_cfg: AlignConfig
    selection: Optional[SelectionTrace] = None
    step_norm: float = 0.0
    logs: dict = field(default_factory=dict)
    obs_norm: Optional[ObsNorm] = None

    @property
    def mode(self) -> str:
        return {"no-align": "fixed", "gcd-baseline": "gcd"}.get(self.variant, "sam")


def variant_proto_cfg(cfg: RunConfig, variant: str) -> ProtoConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    pc = cfg.proto
    if variant == "sinkhorn-assign":
        pc = _with(pc, assign="sinkhorn")
    elif variant == "no-temporal":
        pc = _with(pc, lambda_temporal=0.0)
    elif variant == "fixed-K":
        pc = _with(pc, K=pc.k_max)
    return pc


def run_select_k(cfg: RunConfig, variant: str, data: SeedData) -> SelectionTrace:
    pc = variant_proto_cfg(cfg, variant)
    return select_k(data.train(), pc, cfg.encoder, data.seed)


def train_variant(cfg: RunConfig, variant: str, data: SeedData) -> Artifacts:
    """Train encoder + prototypes, SAM and the policy for one variant and seed."""
    t0 = time.time()
    seed = data.seed
    pc = variant_proto_cfg(cfg, variant)
    norm = ObsNorm.fit(data)
    data = norm.apply(data)
    trace = None
    if variant != "fixed-K":
        trace = select_k(data.train(), pc, cfg.encoder, seed)
        pc = _with(pc, K=trace.chosen)
    enc, bank, plog = train_prototypes(data.train(), pc, cfg.encoder, seed)
    t1 = time.time()

    robot = data.episodes["robot_train"]
    by_script = _group_by_script(robot)
    pairs = []
    for eps in by_script.values():
        for prompt in eps:
            for replay in eps:
                pairs.append((prompt, replay))
    ac = cfg.align
    rng = np.random.default_rng([seed, 555])
    robot_emb = data.world.embodiments["robot"]
    rest = norm(np.stack([rest_frame(data.world, robot_emb, rng) for _ in pairs]), "robot")
    replays = build_replays(enc, bank, pc, pairs, rest=rest, extra=6)
    sam, sam_curve = train_sam(replays, ac, seed, cfg.encoder.d)
    t2 = time.time()

    art = Artifacts(variant, seed, enc, bank, pc, sam, None, ac, trace, obs_norm=norm)
    pdata, norm = policy_dataset(cfg, art, data)
    art.step_norm = norm
    art.policy, pcurve = train_policy(pdata, cfg.policy, seed)
    t3 = time.time()
    art.logs = {"proto": asdict(plog), "sam": sam_curve[-1:] if sam_curve else [], "policy": pcurve,
                "K": pc.K, "seconds": {"proto": t1 - t0, "sam": t2 - t1, "policy": t3 - t2}}
    log.info("trained %s seed %d K=%d in %.1fs", variant, seed, pc.K, t3 - t0)
    return art


def _group_by_script(eps: Sequence[DemoEpisode]) -> Dict[tuple, List[DemoEpisode]]:
    out: Dict[tuple, List[DemoEpisode]] = {}
    for ep in eps:
        out.setdefault((ep.script.complexity, ep.meta.get("script_index"), ep.script.primitives), []).append(ep)
    for v in out.values():
        v.sort(key=lambda e: e.speed)
    return out


# ---------------------------------------------------------------- conditioning
class Conditioner:
    """Produces the policy's conditioning vector for a batch of executions."""

    def __init__(self, art: Artifacts, prompts: Sequence[DemoEpisode], conditioning: str = "full"):
        self.art = art
        self.mode = art.mode
        self.conditioning = conditioning
        plans = [extract_plan(art.encoder, art.bank, p, art.proto_cfg) for p in prompts]
        self.plans = PlanBatch.from_plans(plans)
        self.T_prompt = np.array([p.T for p in prompts])
        self.positions = np.zeros(len(prompts))
        self.weights = None
        d = art.encoder.cfg.d
        if self.mode == "gcd":
            self.goal = self.plans.embeddings[np.arange(len(prompts)), self.plans.lengths - 1]
        self.d = d

    @property
    def dim(self) -> int:
        d, D = self.d, self.plans.rows.shape[2]
        if self.mode == "gcd":
            return 2 * d
        return d if self.conditioning == "embedding" else D

    def __call__(self, t: int, history: np.ndarray) -> np.ndarray:
        """``history`` is (B, t + 1, d_obs): the rest frame plus t executed frames."""
        B, T = len(self.positions), self.plans.embeddings.shape[1]
        ecfg = self.art.encoder.cfg
        if self.mode == "sam":
            win = robot_windows(history, ecfg.L)
            with nk.no_grad():
                q = encode_batch(self.art.encoder, win).data
            z, self.positions, self.weights = align_batch(self.plans, q, self.positions, self.art.sam,
                                                          self.art.align_cfg)
        else:
            idx = np.array([plan_index(max(t - 1, 0), Tp, Tp, ecfg, n)
                            for Tp, n in zip(self.T_prompt, self.plans.lengths)])
            self.positions = np.maximum(self.positions, idx)
            self.weights = np.zeros((B, T))
            self.weights[np.arange(B), idx] = 1.0
            z = readout(self.plans.rows, self.weights, self.plans.lengths, self.art.align_cfg.lead)
            if self.mode == "gcd":
                return np.concatenate([self.goal, z[:, :self.d]], axis=1)
        return z[:, :self.d] if self.conditioning == "embedding" else z


START_REPEAT = 8


def policy_dataset(cfg: RunConfig, art: Artifacts, data: SeedData) -> Tuple[PolicyDataset, float]:
    """(state, z, chunk) triples from conditioning replays over robot x1.0 demonstrations."""
    T_a = cfg.policy.T_a
    groups = _group_by_script(data.episodes["robot_train"])
    execs, prompts = [], []
    for eps in groups.values():
        base = eps[0]  # slowest available speed is the robot's own pace
        use = eps if art.mode == "sam" else [base]
        for p in use:
            execs.append(base)
            prompts.append(p)
    cond = Conditioner(art, prompts, cfg.eval.conditioning)
    world = data.world
    rng = np.random.default_rng([data.seed, 777])
    extra = 0  # steps past the end, where the target chunk is all zeros
    T_max = max(e.T for e in execs) + extra
    robot = world.embodiments["robot"]
    # a standing robot renders rest frames, both before the first and after the last action
    hist = np.stack([[rest_frame(world, robot, rng) for _ in range(T_max + 1)] for _ in execs])
    hist = art.obs_norm(hist, "robot")
    for b, e in enumerate(execs):
        hist[b, 1:e.T + 1] = e.frames
    S, Z, A = [], [], []
    for t in range(T_max):
        z = cond(t, hist[:, :t + 1])
        for b, e in enumerate(execs):
            if t >= e.T + extra:
                continue
            pos = e.actions[:min(t, e.T)].sum(axis=0)
            chunk = np.zeros((T_a, e.actions.shape[1]))
            seg = e.actions[t:t + T_a]
            chunk[:len(seg)] = seg
            # the first steps see only the standing frame, so the plan alone must say what to
            # do; they are rare, hence repeated
            reps = START_REPEAT if t < cfg.policy.execute else 1
            for _ in range(reps):
                S.append(np.concatenate([pos, hist[b, t]]))
                Z.append(z[b])
                A.append(chunk)
    all_a = np.concatenate([e.actions for e in execs])
    norm = float(np.median(np.linalg.norm(all_a, axis=1)))
    return PolicyDataset(np.array(S), np.array(Z), np.array(A)), norm


# ---------------------------------------------------------------- evaluation
@dataclass
class RolloutResult:
    success: np.ndarray
    finished: np.ndarray  # plan exhausted before the step cap
    steps: np.ndarray
    flags: List[List[bool]]
    traces: List[List[Tuple[int, float, np.ndarray]]]


def rollout(cfg: RunConfig, art: Artifacts, world: World, prompts: Sequence[DemoEpisode],
            scripts: Sequence[TaskScript], seed: int, shuffle_z: bool = False,
            keep_traces: bool = False) -> RolloutResult:
    """Closed-loop one-shot execution of a batch of raw (unscaled) prompts, in lockstep."""
    n = len(prompts)
    norm = art.obs_norm or ObsNorm.identity(world.config.d_obs)
    cond = Conditioner(art, norm.episodes(prompts), cfg.eval.conditioning)
    env = RolloutEnv(world, n, seed)
    rng = np.random.default_rng([seed, 9001])
    perm = rng.permutation(n) if shuffle_z else None
    caps = np.array([int(cfg.eval.cap_factor * script_length(world, s)) + cfg.eval.cap_extra for s in scripts])
    history = [norm(env.initial_frames(), "robot")]
    active = np.ones(n, dtype=bool)
    finished = np.zeros(n, dtype=bool)
    steps = np.zeros(n, dtype=int)
    traces: List[List] = [[] for _ in range(n)]
    ex = cfg.policy.execute
    chunk = None
    t = 0
    while active.any() and t < caps.max():
        hist = np.stack(history, axis=1)
        z = cond(t, hist)
        if perm is not None:
            z = z[perm]
        if t % ex == 0:
            s = np.concatenate([env.position, hist[:, -1]], axis=1)
            chunk = sample_action(art.policy, s, z, rng=rng)
        frames = env.step(chunk[:, t % ex], active)
        history.append(norm(frames, "robot"))
        for i in np.flatnonzero(active):
            steps[i] += 1
            if keep_traces:
                traces[i].append((t, float(cond.positions[i]), cond.weights[i].copy()))
        t += 1
        if t % ex == 0:
            at_end = np.round(cond.positions) >= cond.plans.lengths - 1
            halt = active & at_end
            finished |= halt
            active &= ~halt
        active &= steps < caps
    acts = np.stack(env.actions, axis=1) if env.actions else np.zeros((n, 0, world.config.d_a))
    success = np.zeros(n, dtype=bool)
    flags = []
    for i in range(n):
        ok, f = success_check(acts[i, :steps[i]], scripts[i], world, cfg.eval.rho)
        success[i] = ok and finished[i]
        flags.append(f)
    return RolloutResult(success, finished, steps, flags, traces)


def eval_oneshot(cfg: RunConfig, art: Artifacts, world: World, prompt: DemoEpisode, seed: int = 0):
    """Single prompt execution; returns (success, alignment trace CSV with one row per step)."""
    res = rollout(cfg, art, world, [prompt], [prompt.script], seed, keep_traces=True)
    return bool(res.success[0]), trace_csv(res.traces[0])


@dataclass
class CellResult:
    variant: str
    seed: int
    condition: str
    speed: float
    category: str
    successes: List[bool]

    @property
    def rate(self) -> float:
        return 100.0 * float(np.mean(self.successes))


def evaluate(cfg: RunConfig, art: Artifacts, data: SeedData, shuffle_z: bool = False,
             trace_path: Optional[Path] = None) -> List[CellResult]:
    """Run the full evaluation matrix for one trained variant and seed."""
    prompts, scripts, keys = [], [], []
    for cond_name in cfg.eval.conditions:
        split = "human_test" if cond_name == "cross" else "robot_test"
        for ep in data.episodes[split]:
            if ep.speed not in cfg.eval.speeds:
                continue
            prompts.append(ep)
            scripts.append(ep.script)
            keys.append((cond_name, ep.speed, ep.script.complexity, ep.meta.get("script_index")))
    res = rollout(cfg, art, data.world, prompts, scripts, hash_seed(data.seed, "eval", art.variant),
                  shuffle_z=shuffle_z, keep_traces=trace_path is not None)
    if trace_path is not None:
        write_rollout_traces(trace_path, keys, res)
    cells: Dict[tuple, CellResult] = {}
    for key, ok in zip(keys, res.success):
        ck = key[:3]
        if ck not in cells:
            cells[ck] = CellResult(art.variant, data.seed, ck[0], ck[1], ck[2], [])
        cells[ck].successes.append(bool(ok))
    return list(cells.values())


def write_rollout_traces(path: Path, keys, res: RolloutResult) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["condition", "speed", "category", "script_index", "step", "position",
                     "idx1", "w1", "idx2", "w2", "idx3", "w3"])
        for key, tr in zip(keys, res.traces):
            body = trace_csv(tr).splitlines()[1:]
            for line in body:
                wr.writerow(list(key) + line.split(","))


# ---------------------------------------------------------------- reports
@dataclass
class ReportRow:
    variant: str
    condition: str
    speed: str
    category: str
    mean: float
    stderr: float
    seeds: int

    def __post_init__(self):
        if not 0.0 <= self.mean <= 100.0 or self.stderr < 0:
            raise ValueError(f"invalid report row {self}")


REPORT_HEADER = ["variant", "condition", "speed", "category", "success_mean", "success_stderr", "seeds",
                 "config_hash"]


def aggregate(cells: Sequence[CellResult]) -> List[ReportRow]:
    """Mean and standard error over seeds per (variant, condition, speed, category), plus 'all' rows."""
    per: Dict[tuple, Dict[int, List[bool]]] = {}
    for c in cells:
        for key in [(c.variant, c.condition, f"{c.speed:g}", c.category),
                    (c.variant, c.condition, f"{c.speed:g}", "all"),
                    (c.variant, c.condition, "all", "all")]:
            per.setdefault(key, {}).setdefault(c.seed, []).extend(c.successes)
    rows = []
    for key in sorted(per):
        rates = np.array([100.0 * np.mean(v) for _, v in sorted(per[key].items())])
        se = float(rates.std(ddof=1) / np.sqrt(len(rates))) if len(rates) > 1 else 0.0
        rows.append(ReportRow(*key, float(rates.mean()), se, len(rates)))
    return rows


def report_csv(rows: Sequence[ReportRow], config_hash: str) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(REPORT_HEADER)
    for r in rows:
        wr.writerow([r.variant, r.condition, r.speed, r.category, f"{r.mean:.4f}", f"{r.stderr:.4f}",
                     r.seeds, config_hash])
    return buf.getvalue()


def cells_csv(cells: Sequence[CellResult]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["variant", "seed", "condition", "speed", "category", "n", "success_rate"])
    for c in cells:
        wr.writerow([c.variant, c.seed, c.condition, f"{c.speed:g}", c.category, len(c.successes),
                     f"{c.rate:.4f}"])
    return buf.getvalue()


def lookup(rows: Sequence[ReportRow], variant: str, condition: str, speed="all", category="all") -> ReportRow:
    speed = speed if isinstance(speed, str) else f"{speed:g}"
    for r in rows:
        if (r.variant, r.condition, r.speed, r.category) == (variant, condition, speed, category):
            return r
    raise KeyError((variant, condition, speed, category))


# ---------------------------------------------------------------- checkpoints
def artifact_dir(cfg: RunConfig, variant: str, seed: int, out_dir: Optional[str] = None) -> Path:
    return Path(out_dir or cfg.paths.out_dir) / variant / f"seed{seed}"


def save_artifacts(art: Artifacts, directory: Path, config_hash: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"variant": art.variant, "seed": art.seed, "config_hash": config_hash}
    save_encoder(directory / "encoder.ckpt", art.encoder, meta)
    save_prototypes(directory / "prototypes.ckpt", art.bank, art.proto_cfg,
                    dict(meta, proto_config=_proto_meta(art.proto_cfg)))
    save_sam(directory / "sam.ckpt", art.sam, meta)
    save_policy(directory / "policy.ckpt", art.policy, dict(meta, step_norm=art.step_norm))
    if art.obs_norm is not None:
        nk.save_checkpoint(directory / "obs_norm.ckpt", art.obs_norm.state_dict(), dict(meta, kind="obs_norm"))
    if art.selection is not None:
        (directory / "selection.csv").write_text(art.selection.to_csv(), encoding="utf-8")


def _proto_meta(pc: ProtoConfig) -> dict:
    d = asdict(pc)
    return json.loads(json.dumps(d))


def load_artifacts(directory: Path) -> Artifacts:
    from .protodisc import ProtoConfig as PC
    directory = Path(directory)
    if not (directory / "policy.ckpt").exists():
        raise FileNotFoundError(f"no trained checkpoints in {directory}")
    enc = load_encoder(directory / "encoder.ckpt")
    bank, pmeta = load_prototypes(directory / "prototypes.ckpt")
    pc = PC(**pmeta["proto_config"])
    sam = load_sam(directory / "sam.ckpt")
    pol = load_policy(directory / "policy.ckpt")
    _, polmeta = nk.load_checkpoint(directory / "policy.ckpt")
    norm = None
    if (directory / "obs_norm.ckpt").exists():
        norm = ObsNorm.from_state(nk.load_checkpoint(directory / "obs_norm.ckpt")[0])
    return Artifacts(pmeta["variant"], int(pmeta["seed"]), enc, bank, pc, sam, pol, sam.cfg,
                     step_norm=float(polmeta["step_norm"]), obs_norm=norm)


# ---------------------------------------------------------------- drivers
def run_pipeline(cfg: RunConfig, variant: str, seeds: Optional[Sequence[int]] = None,
                 out_dir: Optional[str] = None, data_root: Optional[str] = None,
                 write: bool = True) -> Tuple[List[ReportRow], List[CellResult], Dict[int, Artifacts]]:
    """Train and evaluate one variant over the seed list; optionally write checkpoints and reports."""
    variant_proto_cfg(cfg, variant)  # validates the name
    seeds = list(cfg.eval.seeds if seeds is None else seeds)
    h = cfg.hash()
    cells: List[CellResult] = []
    arts: Dict[int, Artifacts] = {}
    for seed in seeds:
        data = load_seed_data(cfg, seed, data_root)
        art = train_variant(cfg, variant, data)
        d = artifact_dir(cfg, variant, seed, out_dir)
        if write:
            save_artifacts(art, d, h)
        cells += evaluate(cfg, art, data, trace_path=(d / "traces.csv") if write else None)
        arts[seed] = art
    rows = aggregate(cells)
    if write:
        base = Path(out_dir or cfg.paths.out_dir) / variant
        base.mkdir(parents=True, exist_ok=True)
        (base / "report.csv").write_text(report_csv(rows, h), encoding="utf-8")
        (base / "cells.csv").write_text(cells_csv(cells), encoding="utf-8")
    return rows, cells, arts


def export_embeddings(art: Artifacts, episodes: Sequence[DemoEpisode], out_path) -> int:
    """One CSV row per clip: metadata, embedding and assignment values."""
    if art.obs_norm is not None:
        episodes = art.obs_norm.episodes(episodes)
    clips = dataset_clips(episodes, art.encoder.cfg)
    Z = embed_clips(art.encoder, clips)
    n_ep, n_clip, d = Z.shape
    Q = assign(project(art.bank, Z.reshape(-1, d)).data, art.proto_cfg).reshape(n_ep, n_clip, -1)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = 0
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["embodiment", "category", "script_id", "speed", "clip"]
                    + [f"z{i}" for i in range(d)] + [f"q{k}" for k in range(Q.shape[2])])
        for e, ep in enumerate(episodes):
            sid = f"{ep.meta.get('split', '')}:{ep.meta.get('script_index', e)}"
            for c in range(n_clip):
                wr.writerow([ep.embodiment, ep.script.complexity, sid, f"{ep.speed:g}", c]
                            + [repr(float(v)) for v in Z[e, c]] + [repr(float(v)) for v in Q[e, c]])
                rows += 1
    return rows


# ---------------------------------------------------------------- analysis
def coactivation_mass(art: Artifacts, episodes: Sequence[DemoEpisode]) -> Tuple[float, float]:
    """Mean second-largest assignment weight on transition clips and on steady clips.

    A transition clip is centred on a blend: its middle frame (both middle
    frames for even L) has two primitives active in the ground truth. A
    steady clip has no blended frame at all. Clips in between are skipped.
    """
    ecfg = art.encoder.cfg
    if art.obs_norm is not None:
        episodes = art.obs_norm.episodes(episodes)
    Z = embed_clips(art.encoder, dataset_clips(episodes, ecfg))
    n_ep, n_clip, d = Z.shape
    Q = assign(project(art.bank, Z.reshape(-1, d)).data, art.proto_cfg).reshape(n_ep, n_clip, -1)
    second = np.sort(Q, axis=2)[:, :, -2]
    starts = np.arange(0, ecfg.M - ecfg.L + 1, ecfg.stride)
    centre = slice((ecfg.L - 1) // 2, ecfg.L // 2 + 1)
    trans = np.zeros((n_ep, n_clip), dtype=bool)
    steady = np.zeros((n_ep, n_clip), dtype=bool)
    for e, ep in enumerate(episodes):
        blended = (ep.activations > 1e-9).sum(axis=1) >= 2
        idx = subsample_indices(ep.T, ecfg.M)
        for c, s in enumerate(starts):
            win = blended[idx[s:s + ecfg.L]]
            trans[e, c] = win[centre].all()
            steady[e, c] = not win.any()
    if not trans.any() or not steady.any():
        raise ValueError("need both transition and steady clips")
    return float(second[trans].mean()), float(second[steady].mean())


def replay_positions(cfg: RunConfig, art: Artifacts, world: World, prompts: Sequence[DemoEpisode],
                     executions: Sequence[DemoEpisode], seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Feed recorded robot executions through the conditioner for the given prompts.

    Returns (positions (B, T_max + 1), plan lengths (B,)); column t is the
    position after t executed frames, carried forward once an execution ends.
    """
    norm = art.obs_norm or ObsNorm.identity(world.config.d_obs)
    cond = Conditioner(art, norm.episodes(prompts), cfg.eval.conditioning)
    rng = np.random.default_rng([seed, 4242])
    robot = world.embodiments["robot"]
    T_max = max(e.T for e in executions)
    hist = norm(np.stack([[rest_frame(world, robot, rng) for _ in range(T_max + 1)] for _ in executions]),
                "robot")
    for b, e in enumerate(executions):
        f = norm(e.frames, "robot")
        hist[b, 1:e.T + 1] = f
        hist[b, e.T + 1:] = f[-1]
    out = np.zeros((len(executions), T_max + 1))
    lengths = np.array([e.T for e in executions])
    for t in range(T_max + 1):
        cond(t, hist[:, :t + 1])
        out[:, t] = np.where(t <= lengths, cond.positions, out[:, t - 1])
    return out, cond.plans.lengths.copy()
