from pathlib import Path

import numpy as np
import pytest

from protoskill import pipeline as pl
from protoskill.config import load_config

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="module")
def tiny():
    cfg = load_config(ROOT / "configs" / "tiny.json")
    data = pl.generate(cfg, 0)
    return cfg, data, pl.train_variant(cfg, "full", data)


def test_test_scripts_never_seen_in_training():
    cfg = load_config(ROOT / "configs" / "tiny.json")
    sp = pl.split_scripts(cfg, 0)
    for cat in cfg.data.categories:
        test = {s.primitives for s in sp["test"][cat]}
        train = {s.primitives for s in sp["human"][cat] + sp["robot"][cat]}
        assert test and not test & train


def test_export_embeddings_rows_and_norms(tiny, tmp_path):
    cfg, data, art = tiny
    eps = data.episodes["human_test"][:3]
    out = tmp_path / "emb.csv"
    n = pl.export_embeddings(art, eps, out)
    lines = out.read_text().splitlines()
    assert n == len(lines) - 1 > 0
    header = lines[0].split(",")
    zcols = [i for i, h in enumerate(header) if h.startswith("z")]
    qcols = [i for i, h in enumerate(header) if h.startswith("q")]
    vals = np.array([[float(x) for x in ln.split(",")[5:]] for ln in lines[1:]])
    z = vals[:, : len(zcols)]
    q = vals[:, len(zcols):]
    assert np.allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)
    assert np.allclose(q.sum(axis=1), 1.0, atol=1e-9) and len(qcols) == art.bank.K


def test_evaluate_covers_both_conditions(tiny):
    cfg, data, art = tiny
    cells = pl.evaluate(cfg, art, data)
    conds = {c.condition for c in cells}
    assert conds == set(cfg.eval.conditions)
    assert all(0.0 <= c.rate <= 100.0 for c in cells)
    rows = pl.aggregate(cells)
    assert pl.lookup(rows, "full", "cross").seeds == 1


def test_evaluation_is_deterministic(tiny):
    cfg, data, art = tiny
    a = [c.successes for c in pl.evaluate(cfg, art, data)]
    b = [c.successes for c in pl.evaluate(cfg, art, data)]
    assert a == b


def test_coactivation_returns_finite_masses(tiny):
    cfg, data, art = tiny
    t, s = pl.coactivation_mass(art, data.episodes["robot_test"])
    assert 0.0 <= s <= 0.5 and 0.0 <= t <= 0.5


def test_replay_positions_are_monotone(tiny):
    cfg, data, art = tiny
    prompts = [e for e in data.episodes["robot_test"] if e.speed == 2.0][:3]
    execs = [e for e in data.episodes["robot_test"] if e.speed == 1.0][:3]
    pos, lengths = pl.replay_positions(cfg, art, data.world, prompts, execs)
    assert np.all(np.diff(pos, axis=1) >= -1e-12)
    assert np.all(pos <= (np.asarray(lengths) - 1)[:, None] + 1e-9)
