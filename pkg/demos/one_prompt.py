"""Train the full variant on one seed of the tiny config, then follow one human prompt.

Prints the prompt's plan as the most likely prototype per clip, the alignment
position over the robot rollout, and whether the rollout hit every waypoint.

    python demos/one_prompt.py [path/to/config.json]
"""
import sys
from pathlib import Path

import numpy as np

from protoskill import pipeline as pl
from protoskill.align import extract_plan
from protoskill.config import load_config

cfg = load_config(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent.parent / "configs" / "tiny.json")
data = pl.generate(cfg, 0)
art = pl.train_variant(cfg, "full", data)
prompt = data.episodes["human_test"][0]
plan = extract_plan(art.encoder, art.bank, art.obs_norm.episodes([prompt])[0], art.proto_cfg)
print(f"script {prompt.script.primitives} ({prompt.script.complexity}), {prompt.T} frames at x{prompt.speed:g}")
print("plan argmax per clip:", plan.assignments.argmax(axis=1).tolist())
ok, trace = pl.eval_oneshot(cfg, art, data.world, prompt, seed=0)
rows = [line.split(",") for line in trace.splitlines()[1:]]
pos = np.array([float(r[1]) for r in rows])
print("alignment position every 5 steps:", np.round(pos[::5], 2).tolist())
print("success:", ok)
