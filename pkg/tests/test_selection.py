import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from efts.errors import ConfigError, DegenerateDenominatorError, NumericError
from efts.numcore import encoder_forward, init_encoder
from efts.evalhead import center_normalize
from efts.selection import (AffinityScore, EvalTaskPool, TrainState, affinity_window, averaged_affinity,
                            eval_pool_loss, run_selection, score_candidate, select_top_q, take_snapshot,
                            write_affinity_trace)
from efts.synthdata import DatasetSpec, generate_dataset, sample_batch, sample_episode
from efts.tasks import StepBatches, TaskId, init_heads, protonet_loss

SPEC = DatasetSpec(n_base=8, n_validation=6, n_novel=6, d_in=8)


@pytest.fixture(scope="module")
def world():
    ds = generate_dataset(SPEC, 3)
    rng = np.random.default_rng(0)
    enc = init_encoder((8, 16, 8), rng)
    tasks = (TaskId(1, "protonet"), TaskId(2, "nca"), TaskId(3, "classification", n_classes=8),
             TaskId(4, "supcon", views=("original", "noise")))
    state = TrainState(enc, init_heads(tasks, 8, rng))
    prng = np.random.default_rng(1)
    pool = EvalTaskPool(tuple(sample_episode(ds, "validation", 3, 1, 4, prng) for _ in range(4)))
    brng = np.random.default_rng(2)
    batches = [StepBatches(sample_batch(ds, "base", 4, 2, 2, brng)) for _ in range(6)]
    return ds, state, tasks, pool, batches


def ep_loss_oracle(enc, ep, scale):
    z, _ = encoder_forward(enc, np.concatenate([ep.support_x, ep.query_x]))
    n = len(ep.support_y)
    s, q = z[:n], z[n:]
    if scale is not None:
        s, q = center_normalize(s, q)
        s, q = s * np.sqrt(scale), q * np.sqrt(scale)
    return protonet_loss(np.concatenate([s, q]), ep.as_batch().view).loss


@pytest.mark.parametrize("scale", [None, 10.0])
def test_eval_pool_loss_is_sum_over_episodes(world, scale):
    _, state, _, pool, _ = world
    total = eval_pool_loss(state.encoder, pool, scale)
    expected = sum(ep_loss_oracle(state.encoder, ep, scale) for ep in pool.episodes)
    assert total == pytest.approx(expected, rel=1e-12)
    one = EvalTaskPool(pool.episodes[:1])
    assert eval_pool_loss(state.encoder, one, scale) == pytest.approx(ep_loss_oracle(state.encoder, pool.episodes[0], scale), rel=1e-12)
    doubled = EvalTaskPool(pool.episodes[:1] * 2)
    assert eval_pool_loss(state.encoder, doubled, scale) == pytest.approx(2 * eval_pool_loss(state.encoder, one, scale), rel=1e-14)


def test_eval_pool_needs_episodes():
    with pytest.raises(Exception):
        EvalTaskPool(())


def test_affinity_window_arithmetic():
    assert affinity_window(2.0, 1.0) == 0.5
    assert affinity_window(1.3, 1.3) == 0.0
    assert affinity_window(1.0, 1.5) == -0.5
    with pytest.raises(DegenerateDenominatorError):
        affinity_window(1e-13, 0.0)
    with pytest.raises(DegenerateDenominatorError):
        affinity_window(0.0, 0.0)


@settings(max_examples=50)
@given(st.floats(1e-6, 1e6), st.floats(0, 1e6))
def test_affinity_bounded_above_by_one(pre, post):
    assert affinity_window(pre, post) <= 1.0


def test_averaged_affinity():
    assert averaged_affinity([0.37]) == 0.37
    assert averaged_affinity([0.2, 0.4]) == pytest.approx(0.3, abs=1e-15)


@settings(max_examples=50)
@given(st.lists(st.floats(-10, 1), min_size=1, max_size=8), st.randoms())
def test_averaged_affinity_permutation_symmetry(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert averaged_affinity(shuffled) == pytest.approx(averaged_affinity(values), rel=1e-12, abs=1e-12)


def scores_from(values):
    return [AffinityScore(TaskId(i + 1, "nca"), v) for i, v in enumerate(values)]


def test_select_top_q_examples():
    assert [t.index for t in select_top_q(scores_from([0.1, 0.5, 0.3]), 2)] == [2, 3]
    assert [t.index for t in select_top_q(scores_from([0.1, 0.5, 0.3]), 3)] == [1, 2, 3]
    assert [t.index for t in select_top_q(scores_from([0.2, 0.2]), 1)] == [1]
    for q in (0, 4):
        with pytest.raises(ConfigError):
            select_top_q(scores_from([0.1, 0.5, 0.3]), q)


@settings(max_examples=60)
@given(st.lists(st.sampled_from([-0.5, 0.0, 0.1, 0.3, 0.9]), min_size=1, max_size=8),
       st.floats(0.01, 100), st.floats(-10, 10), st.data())
def test_select_top_q_affine_invariance(values, a, b, data):
    q = data.draw(st.integers(1, len(values)))
    base = select_top_q(scores_from(values), q)
    moved = select_top_q(scores_from([a * v + b for v in values]), q)
    assert [t.index for t in base] == [t.index for t in moved]


def test_score_candidate_single_window_and_isolation(world):
    _, state, tasks, pool, batches = world
    snap = take_snapshot(state)
    one = score_candidate(tasks[1], snap, batches, pool, una=3, m=1, lr=0.05)
    assert len(one.records) == 1 and one.z_hat == one.records[0].z
    two = score_candidate(tasks[1], snap, batches, pool, una=3, m=2, lr=0.05)
    assert two.records[0].z == one.records[0].z  # first window is a prefix of the longer run
    assert two.z_hat == pytest.approx(np.mean([r.z for r in two.records]), rel=1e-15)
    assert two.records[1].loss_pre == two.records[0].loss_post  # lookahead continues across windows
    with pytest.raises(Exception):
        score_candidate(tasks[1], snap, batches, pool, una=4, m=2, lr=0.05)


def test_frozen_task_scores_zero(world):
    _, state, _, pool, batches = world
    res = score_candidate(TaskId(9, "constant"), take_snapshot(state), batches, pool, una=2, m=3, lr=0.5)
    assert all(r.z == 0.0 for r in res.records) and res.z_hat == 0.0


def test_numeric_failure_names_task(world):
    _, state, _, pool, batches = world
    with np.errstate(all="ignore"), pytest.raises(NumericError, match="task1:protonet"):
        score_candidate(TaskId(1, "protonet"), take_snapshot(state), batches, pool, una=6, m=1, lr=1e6)


def arrays_of(state):
    return [a.tobytes() for a in state.encoder.arrays()] + \
        [a.tobytes() for k in sorted(state.heads) for a in state.heads[k].arrays()]


def test_run_selection_preserves_live_state(world):
    _, state, tasks, pool, batches = world
    before = arrays_of(state)
    res = run_selection(state, tasks, batches, pool, una=3, m=2, q=2, lr=0.1)
    assert arrays_of(state) == before
    assert len(res.subset) == 2 and len(res.records) == len(tasks) * 2


def test_scoring_order_and_threads_do_not_matter(world):
    _, state, tasks, pool, batches = world
    ref = run_selection(state, tasks, batches, pool, una=3, m=2, q=2, lr=0.1, key=(5,))
    table = {s.task.index: s.z_hat for s in ref.scores}
    for perm in itertools.islice(itertools.permutations(tasks), 0, 24, 5):
        other = run_selection(state, perm, batches, pool, una=3, m=2, q=2, lr=0.1, key=(5,))
        assert {s.task.index: s.z_hat for s in other.scores} == table
    threaded = run_selection(state, tasks, batches, pool, una=3, m=2, q=2, lr=0.1, key=(5,), workers=4)
    assert {s.task.index: s.z_hat for s in threaded.scores} == table
    assert threaded.subset == ref.subset


def test_single_task_set_always_selected(world):
    _, state, tasks, pool, batches = world
    res = run_selection(state, tasks[2:3], batches, pool, una=2, m=1, q=1, lr=0.1)
    assert res.subset == (tasks[2],)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_ascent_candidate_is_rejected(seed):
    ds = generate_dataset(SPEC, 100 + seed)
    rng = np.random.default_rng(seed)
    enc = init_encoder((8, 16, 8), rng)
    tasks = (TaskId(1, "protonet"), TaskId(2, "protonet", ascent=True))
    state = TrainState(enc, init_heads(tasks, 8, rng))
    pool = EvalTaskPool(tuple(sample_episode(ds, "validation", 3, 1, 5, rng) for _ in range(10)))
    batches = [StepBatches(sample_batch(ds, "base", 4, 2, 2, rng)) for _ in range(20)]
    res = run_selection(state, tasks, batches, pool, una=10, m=2, q=1, lr=0.01)
    assert [t.index for t in res.subset] == [1]


def test_trace_rows(world, tmp_path):
    _, state, tasks, pool, batches = world
    res = run_selection(state, tasks, batches, pool, una=2, m=3, q=1, lr=0.1)
    n = write_affinity_trace(tmp_path / "t.csv", [(0, res), (10, res)])
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert n == 2 * len(tasks) * 3 == len(lines) - 1
    assert lines[0].split(",")[:5] == ["event", "step", "task", "window", "z"]
