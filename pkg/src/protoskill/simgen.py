"""Synthetic cross-embodiment demonstrations with known blended primitives.

A *world* fixes a vocabulary of primitives (goal offset, nominal duration and a
phase-dependent feature signature) and two embodiments that render the same
primitive mixture through different linear feature maps. Scripts chain
primitives with raised-cosine cross-fades, so at every transition exactly two
primitives are active.

Observations are rendered from what the agent is doing: the executed velocity
is decomposed over the primitive velocities, and the per-primitive phase is the
accumulated share of that primitive in the current run divided by its nominal
duration. The same rule renders recorded demonstrations and closed-loop robot
rollouts, so nothing about the upcoming primitives leaks into an observation.

The waypoint-velocity action model is a stand-in for a real action space.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

CATEGORY_RANGES: Dict[str, Tuple[int, int]] = {
    "simple": (1, 2),
    "tool-use": (2, 3),
    "multi-step": (3, 5),
    "complex": (5, 8),
}
CATEGORIES = tuple(CATEGORY_RANGES)
EMBODIMENTS = ("human", "robot")
PHASE_RESET = 0.02


@dataclass
class SimConfig:
    G: int = 10
    d_obs: int = 32
    d_sig: int = 12
    d_a: int = 10
    duration_range: Tuple[int, int] = (12, 20)
    blend_range: Tuple[int, int] = (4, 6)
    offset_scale: float = 1.0
    noise_human: float = 0.05
    noise_robot: float = 0.02
    gap: float = 0.5
    bias_gap: float = 0.5
    rho_frac: float = 0.1


@dataclass(frozen=True)
class PrimitiveSpec:
    id: int
    goal_offset: np.ndarray
    duration: int
    signature: np.ndarray  # (2, d_sig): feature directions at phase 0 and phase 1


@dataclass(frozen=True)
class TaskScript:
    primitives: Tuple[int, ...]
    overlaps: Tuple[float, ...]
    complexity: str

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("script needs at least one primitive")
        if len(self.overlaps) != len(self.primitives) - 1:
            raise ValueError("one blend width per transition")

    def to_dict(self) -> dict:
        return {"primitives": list(self.primitives), "overlaps": list(self.overlaps),
                "complexity": self.complexity}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskScript":
        return cls(tuple(int(p) for p in d["primitives"]), tuple(float(o) for o in d["overlaps"]),
                   d["complexity"])


@dataclass
class Embodiment:
    name: str
    feature_map: np.ndarray  # (d_obs, d_sig)
    bias: np.ndarray  # (d_obs,)
    noise_sigma: float
    action_dim: int


@dataclass
class DemoEpisode:
    frames: np.ndarray  # (T, d_obs)
    activations: np.ndarray  # (T, G); evaluation only
    embodiment: str
    speed: float
    seed: int
    script: TaskScript
    actions: Optional[np.ndarray] = None  # (T, d_a), robot only
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.frames.shape[0]


@dataclass
class World:
    config: SimConfig
    primitives: List[PrimitiveSpec]
    embodiments: Dict[str, Embodiment]
    seed: int

    @property
    def G(self) -> int:
        return len(self.primitives)

    @property
    def velocities(self) -> np.ndarray:
        """(d_a, G) per-frame velocity of each primitive at x1.0 speed."""
        return np.stack([p.goal_offset / p.duration for p in self.primitives], axis=1)

    @property
    def durations(self) -> np.ndarray:
        return np.array([p.duration for p in self.primitives], dtype=float)

    @property
    def rho(self) -> float:
        """Success tolerance: a fraction of the mean goal spacing."""
        spacing = np.mean([np.linalg.norm(p.goal_offset) for p in self.primitives])
        return self.config.rho_frac * float(spacing)

    def signature_at(self, k: int, phase) -> np.ndarray:
        s = self.primitives[k].signature
        phase = np.asarray(phase)[..., None]
        return np.cos(0.5 * np.pi * phase) * s[0] + np.sin(0.5 * np.pi * phase) * s[1]

    def waypoints(self, script: TaskScript) -> np.ndarray:
        return np.cumsum([self.primitives[k].goal_offset for k in script.primitives], axis=0)


# ---------------------------------------------------------------- world
def make_world(seed: int, cfg: SimConfig | None = None) -> World:
    cfg = cfg or SimConfig()
    if cfg.G > cfg.d_a:
        raise ValueError("need d_a >= G so executed velocities decompose uniquely")
    rng = np.random.default_rng([seed, 7919])
    q, _ = np.linalg.qr(rng.normal(size=(cfg.d_a, cfg.d_a)))
    dirs = q[:, :cfg.G].T
    mags = rng.uniform(0.8, 1.2, size=cfg.G) * cfg.offset_scale
    lo, hi = cfg.duration_range
    durations = rng.integers(lo, hi + 1, size=cfg.G)

    sigs: List[np.ndarray] = []
    while len(sigs) < cfg.G:
        cand = rng.normal(size=(2, cfg.d_sig))
        cand /= np.linalg.norm(cand, axis=1, keepdims=True)
        flat = cand.ravel() / np.linalg.norm(cand)
        if all(abs(flat @ (s.ravel() / np.linalg.norm(s))) < 0.8 for s in sigs):
            sigs.append(cand)
    prims = [PrimitiveSpec(k, dirs[k] * mags[k], int(durations[k]), sigs[k]) for k in range(cfg.G)]

    a_robot = rng.normal(size=(cfg.d_obs, cfg.d_sig))
    b_robot = rng.normal(scale=0.5, size=cfg.d_obs)
    mix = np.eye(cfg.d_sig) + cfg.gap * rng.normal(size=(cfg.d_sig, cfg.d_sig)) / np.sqrt(cfg.d_sig)
    a_human = a_robot @ mix
    b_human = b_robot + cfg.bias_gap * rng.normal(scale=0.5, size=cfg.d_obs)
    embs = {
        "human": Embodiment("human", a_human, b_human, cfg.noise_human, cfg.d_a),
        "robot": Embodiment("robot", a_robot, b_robot, cfg.noise_robot, cfg.d_a),
    }
    for e in embs.values():
        if np.linalg.matrix_rank(e.feature_map) < cfg.d_sig:
            raise RuntimeError("feature map lost column rank; pick another seed")
    return World(cfg, prims, embs, seed)


# ---------------------------------------------------------------- scripts
def make_task(complexity: str, seed: int, vocab: int = 10, blend_range: Tuple[int, int] = (4, 6)) -> TaskScript:
    """Random primitive chain whose length lies in the category's range."""
    if complexity not in CATEGORY_RANGES:
        raise ValueError(f"unknown complexity {complexity!r}; expected one of {CATEGORIES}")
    lo, hi = CATEGORY_RANGES[complexity]
    rng = np.random.default_rng([seed, CATEGORIES.index(complexity), 104729])
    n = int(rng.integers(lo, hi + 1))
    prims = [int(rng.integers(vocab))]
    while len(prims) < n:
        k = int(rng.integers(vocab))
        if vocab == 1 or k != prims[-1]:
            prims.append(k)
    overlaps = tuple(float(rng.integers(blend_range[0], blend_range[1] + 1)) for _ in range(n - 1))
    return TaskScript(tuple(prims), overlaps, complexity)


def script_length(world: World, script: TaskScript) -> int:
    return int(sum(world.primitives[k].duration for k in script.primitives))


def activations_at(world: World, script: TaskScript, u: np.ndarray) -> np.ndarray:
    """Ground-truth activations at continuous x1.0 times ``u`` -> (len(u), G)."""
    u = np.asarray(u, dtype=float)
    durs = np.array([world.primitives[k].duration for k in script.primitives], dtype=float)
    bounds = np.cumsum(durs)[:-1]
    J = len(durs)
    seg = np.searchsorted(bounds, u, side="right")
    per_slot = np.zeros((len(u), J))
    per_slot[np.arange(len(u)), seg] = 1.0
    for j, (b, w) in enumerate(zip(bounds, script.overlaps)):
        inside = np.abs(u - b) < w / 2
        r = 0.5 * (1.0 - np.cos(np.pi * (u[inside] - b + w / 2) / w))
        per_slot[inside, j] = 1.0 - r
        per_slot[inside, j + 1] = r
    act = np.zeros((len(u), world.G))
    for j, k in enumerate(script.primitives):
        act[:, k] += per_slot[:, j]
    return act


def accumulate_phase(weights: np.ndarray, durations: np.ndarray, phase_mass: np.ndarray | None = None):
    """Per-primitive phase from a sequence of motion weights.

    ``weights`` is (T, G) of non-negative per-frame primitive shares (already
    scaled by speed). A run restarts whenever a primitive's weight drops to the
    reset level. Returns (phases (T, G), final mass (G,)).
    """
    mass = np.zeros(weights.shape[1]) if phase_mass is None else phase_mass.copy()
    out = np.empty_like(weights, dtype=float)
    for t, w in enumerate(weights):
        mass = np.where(w > PHASE_RESET, mass + w, 0.0)
        out[t] = np.clip(mass / durations, 0.0, 1.0)
    return out, mass


def render_frames(world: World, emb: Embodiment, weights: np.ndarray, phases: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
    """Observation frames for per-frame motion weights and phases."""
    total = weights.sum(axis=1, keepdims=True)
    mix_w = weights / np.maximum(total, 1.0)
    mix = np.zeros((len(weights), world.config.d_sig))
    for k in range(world.G):
        wk = mix_w[:, k]
        if np.any(wk > 0):
            mix += wk[:, None] * world.signature_at(k, phases[:, k])
    frames = mix @ emb.feature_map.T + emb.bias
    if emb.noise_sigma > 0:
        frames = frames + rng.normal(scale=emb.noise_sigma, size=frames.shape)
    return frames


def rest_frame(world: World, emb: Embodiment, rng: np.random.Generator) -> np.ndarray:
    """What the embodiment looks like while not moving."""
    z = np.zeros((1, world.G))
    return render_frames(world, emb, z, z, rng)[0]


def _emb_code(name: str) -> int:
    return EMBODIMENTS.index(name)


def render_episode(script: TaskScript, world: World, embodiment: str, speed: float, seed: int,
                   noise: bool = True) -> DemoEpisode:
    """Render one demonstration of ``script`` at ``speed`` (x1.0 or x2.0)."""
    if not speed > 0:
        raise ValueError(f"speed must be positive, got {speed}")
    emb = world.embodiments[embodiment]
    T1 = script_length(world, script)
    T = max(1, int(round(T1 / speed)))
    u = (np.arange(T) + 0.5) * (T1 / T)
    act = activations_at(world, script, u)
    motion = act * (T1 / T)
    phases, _ = accumulate_phase(motion, world.durations)
    rng = np.random.default_rng([seed, _emb_code(embodiment), int(round(speed * 1000))])
    if not noise:
        emb = Embodiment(emb.name, emb.feature_map, emb.bias, 0.0, emb.action_dim)
    frames = render_frames(world, emb, motion, phases, rng)
    actions = motion @ world.velocities.T if embodiment == "robot" else None
    return DemoEpisode(frames, act, embodiment, float(speed), int(seed), script, actions)


# ---------------------------------------------------------------- rollout environment
class RolloutEnv:
    """Closed-loop robot environment for a batch of rollouts.

    The environment integrates executed velocities and renders each new frame
    from the executed motion only.
    """

    def __init__(self, world: World, n: int, seed: int, embodiment: str = "robot"):
        self.world = world
        self.emb = world.embodiments[embodiment]
        self.rng = np.random.default_rng([seed, 31337])
        self.V = world.velocities
        self.V_pinv = np.linalg.pinv(self.V)
        self.position = np.zeros((n, world.config.d_a))
        self.mass = np.zeros((n, world.G))
        self.path = [self.position.copy()]
        self.actions: List[np.ndarray] = []

    def initial_frames(self) -> np.ndarray:
        n = self.position.shape[0]
        return np.stack([rest_frame(self.world, self.emb, self.rng) for _ in range(n)])

    def step(self, actions: np.ndarray, active: np.ndarray | None = None) -> np.ndarray:
        """Apply one action per rollout; returns the frames rendered from that motion."""
        n = actions.shape[0]
        if active is not None:
            actions = np.where(active[:, None], actions, 0.0)
        self.position = self.position + actions
        w = np.clip(actions @ self.V_pinv.T, 0.0, None)
        self.mass = np.where(w > PHASE_RESET, self.mass + w, 0.0)
        phases = np.clip(self.mass / self.world.durations, 0.0, 1.0)
        frames = np.empty((n, self.world.config.d_obs))
        for i in range(n):
            frames[i] = render_frames(self.world, self.emb, w[i:i + 1], phases[i:i + 1], self.rng)[0]
        self.path.append(self.position.copy())
        self.actions.append(actions.copy())
        return frames


# ---------------------------------------------------------------- success
def _segment_distances(path: np.ndarray, point: np.ndarray) -> np.ndarray:
    a, b = path[:-1], path[1:]
    ab = b - a
    denom = (ab * ab).sum(axis=1)
    t = np.where(denom > 0, ((point - a) * ab).sum(axis=1) / np.where(denom > 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(closest - point, axis=1)


def success_check(executed_actions: np.ndarray, script: TaskScript, world: World,
                  rho: float | None = None) -> Tuple[bool, List[bool]]:
    """Does the integrated path pass each cumulative waypoint, in order, within ``rho``?"""
    rho = world.rho if rho is None else rho
    acts = np.asarray(executed_actions, dtype=float)
    path = np.vstack([np.zeros((1, acts.shape[1])), np.cumsum(acts, axis=0)])
    if len(path) < 2:
        path = np.vstack([path, path])
    flags = []
    start = 0
    for wp in world.waypoints(script):
        d = _segment_distances(path[start:], wp)
        hit = np.flatnonzero(d <= rho)
        if hit.size:
            flags.append(True)
            start += int(hit[0])
        else:
            flags.append(False)
    return all(flags), flags


# ---------------------------------------------------------------- dataset files
def episode_record(ep: DemoEpisode, **extra) -> dict:
    rec = {
        "seed": ep.meta.get("seed", ep.seed),
        "episode_seed": ep.seed,
        "embodiment": ep.embodiment,
        "speed": ep.speed,
        "complexity": ep.script.complexity,
        "script": ep.script.to_dict(),
        "frames": ep.frames.tolist(),
        "activations": ep.activations.tolist(),
    }
    if ep.actions is not None:
        rec["actions"] = ep.actions.tolist()
    rec.update({k: v for k, v in ep.meta.items() if k != "seed"})
    rec.update(extra)
    return rec


def episode_from_record(rec: dict) -> DemoEpisode:
    meta = {k: v for k, v in rec.items()
            if k not in ("frames", "activations", "actions", "script", "embodiment", "speed", "episode_seed")}
    return DemoEpisode(
        frames=np.asarray(rec["frames"], dtype=float),
        activations=np.asarray(rec["activations"], dtype=float),
        embodiment=rec["embodiment"],
        speed=float(rec["speed"]),
        seed=int(rec["episode_seed"]),
        script=TaskScript.from_dict(rec["script"]),
        actions=np.asarray(rec["actions"], dtype=float) if "actions" in rec else None,
        meta=meta,
    )


def write_episodes(path, episodes: Iterable[DemoEpisode]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_record(ep), separators=(",", ":")) + "\n")
            n += 1
    return n


def read_episodes(path) -> List[DemoEpisode]:
    with open(path, encoding="utf-8") as fh:
        return [episode_from_record(json.loads(line)) for line in fh if line.strip()]
