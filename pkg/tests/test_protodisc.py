import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protoskill import numkit as nk
from protoskill.encoder import AugmentationConfig, EncoderConfig
from protoskill.protodisc import (PrototypeBank, ProtoConfig, _with, assign, assignment_entropy, k_grid,
                                  load_prototypes, proto_loss, project, save_prototypes, select_k,
                                  sinkhorn_assign, soft_assign, swapped_proto_loss, temporal_loss,
                                  train_prototypes)
from protoskill.simgen import make_task, make_world, render_episode


# ---------------------------------------------------------------- projection and assignment
def test_project_cases():
    rng = np.random.default_rng(0)
    bank = PrototypeBank.random(5, 4, rng)
    S = project(bank, bank.C.data[:, 2][None]).data
    assert abs(S[0, 2] - 1.0) < 1e-12
    C = np.eye(4)[:, :2]
    assert np.array_equal(project(C, np.array([[0.0, 0.0, 1.0, 0.0]])).data, [[0.0, 0.0]])
    Z = rng.normal(size=(6, 5))
    assert np.max(np.abs(project(bank, Z).data - Z @ bank.C.data)) < 1e-12
    with pytest.raises(ValueError):
        project(bank, np.ones((2, 3)))


def test_soft_assign_co_activation():
    q = soft_assign(np.array([[0.9, 0.9, -0.9]]), 0.1).data[0]
    assert abs(q[0] - 0.5) < 1e-6 and abs(q[1] - 0.5) < 1e-6


def test_soft_assign_temperature_limits():
    rng = np.random.default_rng(1)
    S = rng.uniform(-1, 1, size=(10, 6))
    # cosine scores span at most 2, so each entry is within a factor exp(2 / tau) of 1/K
    assert np.max(np.abs(6 * soft_assign(S, 100.0).data - 1.0)) < np.expm1(0.02)
    wide = rng.uniform(-1, 1, size=(10, 32))
    assert np.max(np.abs(soft_assign(wide, 100.0).data - 1 / 32)) < 1e-3
    hard = soft_assign(S, 0.01).data
    onehot = np.eye(6)[S.argmax(axis=1)]
    gap = np.sort(S, axis=1)[:, -1] - np.sort(S, axis=1)[:, -2]
    ok = gap > 0.2  # unique max by a clear margin
    assert np.max(np.abs(hard[ok] - onehot[ok])) < 1e-6


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(-1, 1)), st.floats(1e-3, 1e3))
def test_soft_assign_rows_sum_to_one(S, tau):
    assert np.max(np.abs(soft_assign(S, tau).data.sum(axis=1) - 1.0)) < 1e-9


def test_soft_assign_columns_unconstrained():
    S = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    q = soft_assign(S, 0.1).data
    assert q[:, 0].sum() > 2.9  # all rows may favour one prototype


def test_sinkhorn_zero_scores_uniform():
    Q = sinkhorn_assign(np.zeros((6, 3)), 0.1, 5)
    assert np.allclose(Q, 1 / 3, atol=1e-15)


def test_sinkhorn_column_marginals():
    rng = np.random.default_rng(2)
    B, K = 40, 8
    Q = sinkhorn_assign(rng.uniform(-1, 1, size=(B, K)), 0.1, 50)
    assert np.max(np.abs(Q.sum(axis=0) - B / K) / (B / K)) < 0.01
    assert np.allclose(Q.sum(axis=1), 1.0, atol=1e-12)


def test_sinkhorn_diagonal_matches_optimal_assignment():
    """Brute force over permutations picks the same one-hot rows."""
    import itertools
    rng = np.random.default_rng(3)
    K = 5
    perm = rng.permutation(K)
    S = 0.2 * rng.uniform(-1, 1, size=(K, K))
    S[np.arange(K), perm] = 1.0
    best = max(itertools.permutations(range(K)), key=lambda p: sum(S[i, p[i]] for i in range(K)))
    Q = sinkhorn_assign(S, 0.02, 100)
    assert np.max(np.abs(Q - np.eye(K)[list(best)])) < 1e-3


def test_sinkhorn_validates():
    with pytest.raises(ValueError):
        sinkhorn_assign(np.zeros((2, 2)), 0.0, 3)
    with pytest.raises(ValueError):
        sinkhorn_assign(np.zeros((2, 2)), 0.1, 0)


def test_assign_dispatch():
    S = np.random.default_rng(4).uniform(-1, 1, size=(8, 4))
    assert np.allclose(assign(S, ProtoConfig(tau=0.2)), soft_assign(S, 0.2).data)
    sk = ProtoConfig(assign="sinkhorn", sinkhorn_tau=0.05, sinkhorn_iters=3)
    assert np.allclose(assign(S, sk), sinkhorn_assign(S, 0.05, 3))


# ---------------------------------------------------------------- losses
def test_proto_loss_cases():
    Q = np.eye(4)[[0, 2, 1]]
    assert proto_loss(Q, Q).item() == 0.0
    assert abs(proto_loss(Q, np.full((3, 4), 0.25)).item() - math.log(4)) < 1e-12
    rng = np.random.default_rng(5)
    A, P = rng.dirichlet(np.ones(6), size=4), rng.dirichlet(np.ones(6), size=4)
    ref = -sum(A[b, k] * math.log(P[b, k]) for b in range(4) for k in range(6)) / 4
    assert abs(proto_loss(A, P).item() - ref) < 1e-12


def test_proto_loss_gradient():
    rng = np.random.default_rng(6)
    Q1 = rng.dirichlet(np.ones(5), size=3)
    assert nk.grad_check(lambda s: proto_loss(Q1, nk.softmax_rows(s, 0.1)), rng.uniform(-1, 1, (3, 5))) < 1e-4


def test_swapped_proto_loss_gradient():
    """Full training-form loss through encoder-free scores."""
    rng = np.random.default_rng(7)
    S2 = rng.uniform(-1, 1, (4, 6))

    S1 = rng.uniform(-1, 1, (4, 6))
    # targets are constants in the loss, so they are computed once from the base point
    q1, q2 = soft_assign(S1, 0.05).data, soft_assign(S2, 0.05).data

    def f(s1):
        lp1, lp2 = nk.log_softmax_rows(s1, 0.1), nk.log_softmax_rows(S2, 0.1)
        return swapped_proto_loss(q1, lp1, q2, lp2)

    assert nk.grad_check(f, S1) < 1e-4


def test_temporal_loss_identical_embeddings():
    Z = np.tile(np.array([[0.6, 0.8]]), (7, 1))
    assert abs(temporal_loss(Z, 1, 0.1).item() - math.log(6)) < 1e-12


def test_temporal_loss_prefers_clustered_positives():
    rng = np.random.default_rng(8)
    a, b = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    # alternating clusters: with delta=2 every positive shares its anchor's cluster
    Z = np.stack([a, b] * 5) + 0.05 * rng.normal(size=(10, 3))
    good = temporal_loss(Z, 2, 0.1).item()
    shuffled = np.mean([temporal_loss(Z[rng.permutation(10)], 2, 0.1).item() for _ in range(20)])
    assert good < math.log(9)
    assert good < shuffled


def test_temporal_loss_gradient_and_batching():
    rng = np.random.default_rng(9)
    assert nk.grad_check(lambda z: temporal_loss(z, 1, 0.5), rng.normal(size=(6, 4))) < 1e-4
    Z = rng.normal(size=(3, 5, 4))
    batched = temporal_loss(Z, 2, 0.3).item()
    each = np.mean([temporal_loss(Z[i], 2, 0.3).item() for i in range(3)])
    assert abs(batched - each) < 1e-12
    with pytest.raises(ValueError):
        temporal_loss(rng.normal(size=(2, 4)), 2, 0.1)


# ---------------------------------------------------------------- entropy
@pytest.mark.parametrize("K", [2, 8, 64])
def test_entropy_uniform(K):
    assert abs(assignment_entropy(np.full((10, K), 1.0 / K)) - math.log(K) / K) < 1e-12


def test_entropy_collapsed_and_random():
    Q = np.zeros((9, 5))
    Q[:, 0] = 1.0
    assert assignment_entropy(Q) == 0.0
    R = np.random.default_rng(10).dirichlet(np.ones(5), size=12)
    p = R.mean(axis=0)
    assert abs(assignment_entropy(R) - (-(p * np.log(p)).sum() / 5)) < 1e-12
    assert abs(assignment_entropy(R, normalized=False) - (-(p * np.log(p)).sum())) < 1e-12


# ---------------------------------------------------------------- selection rule
def test_k_grid():
    assert k_grid(ProtoConfig(k_min=8, k_max=64, delta_k=8)) == [8, 16, 24, 32, 40, 48, 56, 64]


def _noisy_entropy(K):
    return math.log(K) / K + 1e-4 * math.sin(K)


def test_select_k_degenerate_thresholds():
    cfg = ProtoConfig(k_min=8, k_max=40, delta_k=8, theta=math.inf)
    assert select_k([], cfg, EncoderConfig(), 0, entropy_fn=_noisy_entropy).chosen == 8
    trace = select_k([], _with(cfg, theta=0.0), EncoderConfig(), 0, entropy_fn=_noisy_entropy)
    assert trace.chosen == 40
    assert [e[0] for e in trace.entries] == [8, 16, 24, 32, 40]


def test_select_k_stops_at_first_small_change():
    H = {8: 1.0, 16: 0.5, 24: 0.45, 32: 0.2}
    trace = select_k([], ProtoConfig(k_min=8, k_max=32, delta_k=8, theta=0.1), EncoderConfig(), 0,
                     entropy_fn=H.__getitem__)
    assert trace.chosen == 16
    assert trace.to_csv().splitlines()[2] == f"16,0.5,{abs(0.45 - 0.5)!r},1"


def test_select_k_needs_two_grid_points():
    with pytest.raises(ValueError):
        select_k([], ProtoConfig(k_min=8, k_max=8), EncoderConfig(), 0, entropy_fn=_noisy_entropy)


def test_default_threshold_is_scale_aware():
    assert ProtoConfig(k_min=8).threshold == pytest.approx(0.01 * math.log(8) / 8)


# ---------------------------------------------------------------- training
@pytest.fixture(scope="module")
def tiny_world_data():
    world = make_world(0)
    eps = [render_episode(make_task("multi-step", i, vocab=4), world, emb, 1.0, i)
           for i in range(12) for emb in ("human", "robot")]
    return eps


ENC = EncoderConfig(L=8, stride=2, M=32, d=8, backbone_dims=(16,), temporal_dims=(16,))


def test_training_descends_without_regularizers(tiny_world_data):
    # six episodes fill one batch, so every step sees the same clips
    cfg = ProtoConfig(K=8, lambda_temporal=0.0, lambda_ent=0.0, augment=AugmentationConfig(), lr=1e-3,
                      episodes_per_batch=6)
    _, _, log = train_prototypes(tiny_world_data[:6], cfg, ENC, 0, steps=10, log_every=1)
    assert all(b <= a + 1e-12 for a, b in zip(log.loss, log.loss[1:]))


def test_training_is_deterministic(tiny_world_data):
    cfg = ProtoConfig(K=8, steps=20)
    a = train_prototypes(tiny_world_data, cfg, ENC, 3)
    b = train_prototypes(tiny_world_data, cfg, ENC, 3)
    assert np.array_equal(a[1].C.data, b[1].C.data)
    assert a[2].loss == b[2].loss


def test_prototypes_stay_unit_norm(tiny_world_data, tmp_path):
    _, bank, _ = train_prototypes(tiny_world_data, ProtoConfig(K=8, steps=15), ENC, 1)
    assert np.allclose(np.linalg.norm(bank.C.data, axis=0), 1.0, atol=1e-12)
    save_prototypes(tmp_path / "p.ckpt", bank, ProtoConfig(K=8))
    back, meta = load_prototypes(tmp_path / "p.ckpt")
    assert np.array_equal(back.C.data, bank.C.data) and meta["K"] == 8


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train_prototypes([], ProtoConfig(), ENC, 0)


def test_invalid_proto_config():
    with pytest.raises(ValueError):
        ProtoConfig(k_min=70, k_max=64)
    with pytest.raises(ValueError):
        ProtoConfig(assign="hard")
