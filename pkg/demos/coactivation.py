"""Second-largest prototype weight on clips centred on a blend versus steady clips.

    python demos/coactivation.py [path/to/config.json]
"""
import sys
from pathlib import Path

from protoskill import pipeline as pl
from protoskill.config import load_config

cfg = load_config(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent.parent / "configs" / "tiny.json")
for seed in cfg.eval.seeds:
    data = pl.generate(cfg, seed)
    art = pl.train_variant(cfg, "full", data)
    trans, steady = pl.coactivation_mass(art, data.episodes["human_test"] + data.episodes["robot_test"])
    print(f"seed {seed}: K={art.proto_cfg.K} transition {trans:.3f} steady {steady:.3f} ratio {trans / steady:.2f}")
