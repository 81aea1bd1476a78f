import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoskill.simgen import (CATEGORIES, CATEGORY_RANGES, RolloutEnv, SimConfig, TaskScript,
                               activations_at, make_task, make_world, read_episodes, render_episode,
                               script_length, success_check, write_episodes)


@pytest.fixture(scope="module")
def world():
    return make_world(0)


def test_world_primitive_directions_are_orthogonal(world):
    V = world.velocities / np.linalg.norm(world.velocities, axis=0)
    assert np.allclose(V.T @ V, np.eye(world.G), atol=1e-12)


def test_world_rejects_too_many_primitives():
    with pytest.raises(ValueError):
        make_world(0, SimConfig(G=12, d_a=10))


@pytest.mark.parametrize("cat", CATEGORIES)
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_make_task_length_in_category_range(cat, seed):
    s = make_task(cat, seed)
    lo, hi = CATEGORY_RANGES[cat]
    assert lo <= len(s.primitives) <= hi
    assert all(a != b for a, b in zip(s.primitives, s.primitives[1:]))


def test_simple_and_complex_lengths():
    assert all(1 <= len(make_task("simple", i).primitives) <= 2 for i in range(50))
    assert all(5 <= len(make_task("complex", i).primitives) <= 8 for i in range(50))


def test_make_task_deterministic_and_validates():
    assert make_task("multi-step", 7) == make_task("multi-step", 7)
    with pytest.raises(ValueError):
        make_task("medium", 0)


def test_blend_narrower_than_neighbours(world):
    for i in range(30):
        s = make_task("complex", i)
        durs = [world.primitives[k].duration for k in s.primitives]
        for j, w in enumerate(s.overlaps):
            assert w < min(durs[j], durs[j + 1])


def test_speed_two_halves_length(world):
    s = make_task("complex", 3)
    e1 = render_episode(s, world, "robot", 1.0, 1)
    e2 = render_episode(s, world, "robot", 2.0, 1)
    assert e1.T == script_length(world, s)
    assert abs(e2.T - e1.T / 2) <= 0.5


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**5), cat=st.sampled_from(CATEGORIES), speed=st.sampled_from([1.0, 2.0]))
def test_activation_rows_are_partitions_of_unity(seed, cat, speed):
    w = make_world(seed % 3)
    ep = render_episode(make_task(cat, seed), w, "human", speed, seed)
    assert np.max(np.abs(ep.activations.sum(axis=1) - 1.0)) < 1e-9


def test_noise_free_embodiments_share_activations(world):
    s = make_task("multi-step", 11)
    h = render_episode(s, world, "human", 1.0, 5, noise=False)
    r = render_episode(s, world, "robot", 1.0, 5, noise=False)
    assert np.array_equal(h.activations, r.activations)
    assert not np.allclose(h.frames, r.frames)


def test_transitions_have_two_active_primitives(world):
    s = TaskScript((0, 1), (6.0,), "simple")
    b = world.primitives[0].duration
    act = activations_at(world, s, np.array([b - 1.0, b, b + 1.0]))
    assert np.all((act > 0).sum(axis=1) == 2)


def test_ground_truth_replay_succeeds(world):
    for i in range(10):
        s = make_task(CATEGORIES[i % 4], i)
        for speed in (1.0, 2.0):
            ep = render_episode(s, world, "robot", speed, i)
            ok, flags = success_check(ep.actions, s, world)
            assert ok and all(flags)


def test_zero_actions_fail(world):
    s = make_task("tool-use", 2)
    ok, flags = success_check(np.zeros((30, world.config.d_a)), s, world)
    assert not ok and not any(flags)


def test_zeroed_segment_flags_that_primitive():
    """Oracle: replaying ground truth with one primitive's frames removed misses exactly its waypoint."""
    world = make_world(2)
    s = TaskScript((0, 3, 5), (4.0, 4.0), "tool-use")
    ep = render_episode(s, world, "robot", 1.0, 0)
    d = [world.primitives[k].duration for k in s.primitives]
    acts = ep.actions.copy()
    acts[d[0] + 3:d[0] + d[1] - 3] = 0.0  # the middle primitive never completes
    ok, flags = success_check(acts, s, world)
    assert not ok
    assert flags[1] is False
    assert flags[0] is True


def test_rollout_env_integrates_and_renders(world):
    s = make_task("simple", 0)
    ep = render_episode(s, world, "robot", 1.0, 0)
    env = RolloutEnv(world, 1, 0)
    for a in ep.actions:
        env.step(a[None])
    assert np.allclose(env.position[0], ep.actions.sum(axis=0))
    ok, _ = success_check(np.concatenate(env.actions), s, world)
    assert ok


def test_episode_file_roundtrip(tmp_path, world):
    eps = [render_episode(make_task("complex", i), world, emb, 2.0, i)
           for i, emb in enumerate(["human", "robot"])]
    n = write_episodes(tmp_path / "e.jsonl", eps)
    back = read_episodes(tmp_path / "e.jsonl")
    assert n == 2 == len(back) == len((tmp_path / "e.jsonl").read_text().splitlines())
    for a, b in zip(eps, back):
        assert np.array_equal(a.frames, b.frames)
        assert a.script == b.script and a.embodiment == b.embodiment
    assert back[0].actions is None and np.array_equal(back[1].actions, eps[1].actions)
    write_episodes(tmp_path / "f.jsonl", eps)
    assert (tmp_path / "e.jsonl").read_bytes() == (tmp_path / "f.jsonl").read_bytes()


def test_bad_speed_rejected(world):
    with pytest.raises(ValueError):
        render_episode(make_task("simple", 0), world, "robot", 0.0, 0)
