"""Returns, baselines, gradient assembly, and the update loop."""

import csv
import math

import numpy as np
import pytest

from easched.errors import ConfigError
from easched.policy import (
    PolicyLayout,
    adam_init,
    grad_log_prob,
    init_params,
    load_checkpoint,
    zero_params,
)
from easched.simenv import ClusterConfig, ClusterSim
from easched.training import (
    TAG_EP,
    TAG_INIT,
    TrainConfig,
    _entropy_dlogits,
    _sequence_gradient,
    compute_baselines,
    compute_returns,
    rollout_group,
    rollout_groups,
    run_episode,
    train,
    train_iteration,
    training_pool,
)
from easched.workload import WorkloadConfig, derive_seed, generate_sequence

TINY_WORKLOAD = WorkloadConfig(arrival_rate=0.6, arrival_window=10, seed=5)


def tiny_setup(param_seed=3):
    cluster = ClusterConfig()
    params = init_params(PolicyLayout.for_cluster(cluster), param_seed)
    seq = generate_sequence(TINY_WORKLOAD)
    return cluster, params, seq


# -- returns ------------------------------------------------------------------

def test_compute_returns_undiscounted():
    v = compute_returns([-1.0, -2.0, -3.0], 1.0)
    assert v.tolist() == [-6.0, -5.0, -3.0]


def test_compute_returns_discounted():
    v = compute_returns([-1.0, -2.0], 0.5)
    assert v.tolist() == [-2.0, -2.0]


def test_compute_returns_zeros_and_empty():
    assert compute_returns(np.zeros(4), 1.0).tolist() == [0.0] * 4
    assert compute_returns([], 1.0).size == 0


def test_compute_returns_matches_double_loop():
    rng = np.random.default_rng(8)
    r = rng.normal(size=17)
    for gamma in (1.0, 0.9, 0.5):
        v = compute_returns(r, gamma)
        want = [sum(gamma ** (i - t) * r[i] for i in range(t, len(r)))
                for t in range(len(r))]
        np.testing.assert_allclose(v, want, rtol=1e-12)


def test_compute_returns_accepts_trajectory():
    cluster, params, seq = tiny_setup()
    traj = run_episode(params, seq, cluster, seed=1)
    np.testing.assert_array_equal(compute_returns(traj), compute_returns(traj.rewards))


# -- baselines ----------------------------------------------------------------

def test_baseline_is_mean_at_each_step():
    b = compute_baselines([np.array([4.0, 1.0]), np.array([6.0, 3.0])])
    assert b.tolist() == [5.0, 2.0]


def test_baseline_single_trajectory_degenerates():
    v = np.array([3.0, 1.0, -2.0])
    assert compute_baselines([v]).tolist() == v.tolist()


def test_baseline_unequal_lengths_mean_over_present():
    b = compute_baselines([np.array([4.0]), np.array([6.0, 9.0])])
    assert b.tolist() == [5.0, 9.0]


def test_baseline_property_zero_mean_over_present():
    cluster, params, seq = tiny_setup()
    trajs = rollout_group(params, seq, cluster, list(range(40, 46)))
    returns = [compute_returns(t.rewards) for t in trajs]
    base = compute_baselines(returns)
    for t in range(len(base)):
        present = [v[t] - base[t] for v in returns if len(v) > t]
        assert abs(np.mean(present)) < 1e-9


# -- episodes -----------------------------------------------------------------

def test_empty_sequence_episode_holds_to_window_end():
    cluster, params, _ = tiny_setup()
    empty = generate_sequence(WorkloadConfig(arrival_rate=0.0, arrival_window=10))
    traj = run_episode(params, empty, cluster, seed=0)
    assert traj.num_steps == 10
    assert traj.final_clock == 10
    assert traj.total_return == 0.0
    assert not traj.truncated
    assert traj.job_outcomes == ()


def test_episode_reproducible_bit_for_bit():
    cluster, params, seq = tiny_setup()
    a = run_episode(params, seq, cluster, seed=12, collect_obs=True)
    b = run_episode(params, seq, cluster, seed=12, collect_obs=True)
    np.testing.assert_array_equal(a.actions, b.actions)
    np.testing.assert_array_equal(a.rewards, b.rewards)
    np.testing.assert_array_equal(a.obs_packed, b.obs_packed)
    np.testing.assert_array_equal(a.probs, b.probs)
    c = run_episode(params, seq, cluster, seed=13)
    assert not np.array_equal(a.actions, c.actions)


def test_time_advances_equal_final_clock():
    cluster, params, seq = tiny_setup()
    traj = run_episode(params, seq, cluster, seed=2)
    env = ClusterSim(seq, cluster, traj.duration_seed)
    advances = sum(env.step(int(a)).time_advanced for a in traj.actions)
    assert advances == traj.final_clock == env.clock
    assert env.is_terminal()


def test_total_return_is_sum_of_rewards():
    cluster, params, seq = tiny_setup()
    traj = run_episode(params, seq, cluster, seed=6)
    assert traj.total_return == pytest.approx(traj.rewards.sum(), abs=1e-12)


def test_negative_v0_equals_total_edp():
    cluster, params, seq = tiny_setup()
    for seed in range(4):
        traj = run_episode(params, seq, cluster, seed=seed)
        assert not traj.truncated
        v0 = compute_returns(traj.rewards, 1.0)[0]
        assert -v0 == pytest.approx(traj.total_normalized_edp(), rel=1e-9)


def test_truncated_episode_flagged():
    wcfg = WorkloadConfig(arrival_rate=1.0, arrival_window=5, seed=2)
    seq = generate_sequence(wcfg)
    cluster = ClusterConfig(max_episode_timesteps=5)
    hold_forever = lambda env, rng: env.cluster.hold_action
    traj = run_episode(hold_forever, seq, cluster, seed=0)
    assert traj.truncated
    assert traj.final_clock == 5
    assert traj.job_outcomes == ()


def test_greedy_mode_ignores_action_rng():
    cluster, params, seq = tiny_setup()
    a = run_episode(params, seq, cluster, seed=1, mode="greedy")
    b = run_episode(params, seq, cluster, seed=999, mode="greedy")
    # same duration seed is required for identical realized durations
    c = run_episode(params, seq, cluster, seed=1, mode="greedy")
    np.testing.assert_array_equal(a.actions, c.actions)
    assert a.rewards.tolist() == c.rewards.tolist()
    assert not np.array_equal(a.rewards, b.rewards) or np.array_equal(a.actions, b.actions)


def test_unpack_observations_roundtrip():
    cluster, params, seq = tiny_setup()
    traj = run_episode(params, seq, cluster, seed=3, collect_obs=True)
    imgs = traj.unpack_observations()
    assert imgs.shape == (traj.num_steps, cluster.image_height, cluster.image_width)
    assert set(np.unique(imgs)) <= {0, 1}
    repacked = np.stack([np.packbits(img, axis=None) for img in imgs])
    np.testing.assert_array_equal(repacked, traj.obs_packed)


def test_batched_rollouts_match_single_runs():
    cluster, params, seq = tiny_setup()
    seeds = [70, 71, 72, 73, 74]
    group = rollout_group(params, seq, cluster, seeds)
    for seed, batched in zip(seeds, group):
        solo = run_episode(params, seq, cluster, seed=seed, collect_obs=True)
        np.testing.assert_array_equal(batched.actions, solo.actions)
        np.testing.assert_array_equal(batched.rewards, solo.rewards)
        np.testing.assert_array_equal(batched.obs_packed, solo.obs_packed)
        np.testing.assert_allclose(batched.probs, solo.probs, rtol=1e-9, atol=1e-12)
        assert batched.total_return == solo.total_return


def test_rollout_groups_handles_multiple_sequences():
    cluster, params, _ = tiny_setup()
    seq_a = generate_sequence(TINY_WORKLOAD)
    seq_b = generate_sequence(WorkloadConfig(arrival_rate=0.4, arrival_window=8, seed=9))
    grouped = rollout_groups(params, [(seq_a, [1, 2]), (seq_b, [3])], cluster)
    assert [len(g) for g in grouped] == [2, 1]
    solo = run_episode(params, seq_b, cluster, seed=3, collect_obs=True)
    np.testing.assert_array_equal(grouped[1][0].actions, solo.actions)


# -- gradients ----------------------------------------------------------------

def test_sequence_gradient_matches_hand_sum():
    cluster, params, seq = tiny_setup()
    trajs = rollout_group(params, seq, cluster, [20, 21])
    returns = [compute_returns(t.rewards) for t in trajs]
    base = compute_baselines(returns)
    want = zero_params(params.layout)
    for traj, v in zip(trajs, returns):
        imgs = traj.unpack_observations()
        for t in range(traj.num_steps):
            g = grad_log_prob(params, imgs[t], int(traj.actions[t]))
            want.add_scaled(g, v[t] - base[t])
    got = _sequence_gradient(params, trajs, 1.0, 0.0)
    for gb, wb in zip(got.blocks(), want.blocks()):
        np.testing.assert_allclose(gb, wb, rtol=1e-10, atol=1e-12)


def test_entropy_dlogits_matches_numeric_gradient():
    rng = np.random.default_rng(4)
    logits = rng.normal(scale=2.0, size=(3, 7))

    def entropy(row):
        e = np.exp(row - row.max())
        p = e / e.sum()
        return -(p * np.log(p)).sum()

    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    got = _entropy_dlogits(probs)
    h = 1e-6
    for i in range(logits.shape[0]):
        for j in range(logits.shape[1]):
            up, dn = logits[i].copy(), logits[i].copy()
            up[j] += h
            dn[j] -= h
            num = (entropy(up) - entropy(dn)) / (2 * h)
            assert got[i, j] == pytest.approx(num, abs=1e-6)


# -- the update loop ----------------------------------------------------------

def small_cfg(**kw):
    base = dict(sequences_per_iter=2, trajectories_per_sequence=2,
                iterations=2, seed=13)
    base.update(kw)
    return TrainConfig(**base)


def test_train_config_validation():
    for bad in (dict(sequences_per_iter=0), dict(gamma=0.0), dict(gamma=1.5),
                dict(lr=0.0), dict(eval_mode="argmax"), dict(threads=0),
                dict(iterations=-1), dict(entropy_bonus=-0.1)):
        with pytest.raises(ConfigError):
            small_cfg(**bad).validate()


def test_single_trajectory_iteration_leaves_params_unchanged():
    cluster, params, _ = tiny_setup()
    cfg = small_cfg(trajectories_per_sequence=1, sequences_per_iter=2)
    pool = training_pool(cfg, TINY_WORKLOAD)
    before = params.copy()
    adam = adam_init(params.layout)
    train_iteration(params, adam, pool, cfg, cluster, iteration=0)
    for b, a in zip(before.blocks(), params.blocks()):
        np.testing.assert_array_equal(b, a)
    assert adam.step_count == 1


def test_train_iteration_reproducible():
    cluster, params, _ = tiny_setup()
    cfg = small_cfg()
    pool = training_pool(cfg, TINY_WORKLOAD)
    runs = []
    for _ in range(2):
        p = params.copy()
        stats = train_iteration(p, adam_init(p.layout), pool, cfg, cluster, iteration=0)
        runs.append((p, stats))
    for b0, b1 in zip(runs[0][0].blocks(), runs[1][0].blocks()):
        np.testing.assert_array_equal(b0, b1)
    assert runs[0][1] == runs[1][1]


def test_train_iteration_stats_match_manual_rollouts():
    cluster, params, _ = tiny_setup()
    cfg = small_cfg()
    pool = training_pool(cfg, TINY_WORKLOAD)
    pairs = []
    for s in range(cfg.sequences_per_iter):
        seeds = [derive_seed(cfg.seed, TAG_EP, 0, s, m)
                 for m in range(cfg.trajectories_per_sequence)]
        pairs.append((pool[s], seeds))
    groups = rollout_groups(params.copy(), pairs, cluster)
    want_return = np.mean([t.total_return for g in groups for t in g])
    stats = train_iteration(params, adam_init(params.layout), pool, cfg,
                            cluster, iteration=0)
    assert stats.mean_return == pytest.approx(want_return, rel=1e-12)
    all_edps = [o.edp for g in groups for t in g for o in t.job_outcomes]
    assert stats.mean_normalized_edp == pytest.approx(np.mean(all_edps), rel=1e-12)


def test_train_iteration_threads_agree():
    cluster, params, _ = tiny_setup()
    cfg1 = small_cfg(sequences_per_iter=4)
    cfg2 = small_cfg(sequences_per_iter=4, threads=2)
    pool = training_pool(cfg1, TINY_WORKLOAD)
    p1, p2 = params.copy(), params.copy()
    s1 = train_iteration(p1, adam_init(p1.layout), pool, cfg1, cluster, iteration=0)
    s2 = train_iteration(p2, adam_init(p2.layout), pool, cfg2, cluster, iteration=0)
    assert s1.mean_return == pytest.approx(s2.mean_return, rel=1e-9)
    for b1, b2 in zip(p1.blocks(), p2.blocks()):
        np.testing.assert_allclose(b1, b2, rtol=1e-9, atol=1e-12)


def test_grad_clip_inactive_when_loose():
    cluster, params, _ = tiny_setup()
    pool = training_pool(small_cfg(), TINY_WORKLOAD)
    outs = []
    for clip in (0.0, 1e9, 1e-6):
        p = params.copy()
        cfg = small_cfg(grad_clip=clip)
        train_iteration(p, adam_init(p.layout), pool, cfg, cluster, iteration=0)
        outs.append(p)
    for b0, b1 in zip(outs[0].blocks(), outs[1].blocks()):
        np.testing.assert_array_equal(b0, b1)
    assert any(not np.array_equal(b0, b2)
               for b0, b2 in zip(outs[0].blocks(), outs[2].blocks()))


def test_entropy_bonus_changes_update():
    cluster, params, _ = tiny_setup()
    pool = training_pool(small_cfg(), TINY_WORKLOAD)
    p0, p1 = params.copy(), params.copy()
    train_iteration(p0, adam_init(p0.layout), pool, small_cfg(), cluster, 0)
    train_iteration(p1, adam_init(p1.layout), pool, small_cfg(entropy_bonus=0.5),
                    cluster, 0)
    assert any(not np.array_equal(b0, b1)
               for b0, b1 in zip(p0.blocks(), p1.blocks()))


def test_training_pool_fixed_vs_resampled():
    cfg = small_cfg()
    a = training_pool(cfg, TINY_WORKLOAD, iteration=0)
    b = training_pool(cfg, TINY_WORKLOAD, iteration=7)
    assert [s.jobs for s in a] == [s.jobs for s in b]
    cfg_fresh = small_cfg(fixed_pool=False)
    c = training_pool(cfg_fresh, TINY_WORKLOAD, iteration=0)
    d = training_pool(cfg_fresh, TINY_WORKLOAD, iteration=7)
    assert [s.jobs for s in c] != [s.jobs for s in d]


def test_train_zero_iterations(tmp_path):
    cfg = small_cfg(iterations=0)
    cluster = ClusterConfig()
    params, curve = train(cfg, cluster, TINY_WORKLOAD, out_dir=str(tmp_path))
    assert curve == []
    want = init_params(PolicyLayout.for_cluster(cluster), derive_seed(cfg.seed, TAG_INIT))
    for got, exp in zip(params.blocks(), want.blocks()):
        np.testing.assert_array_equal(got, exp)
    loaded, adam = load_checkpoint(tmp_path / "checkpoint_final.bin")
    for got, exp in zip(loaded.blocks(), params.blocks()):
        np.testing.assert_array_equal(got, exp)


def test_train_writes_curve_and_checkpoints(tmp_path):
    cfg = small_cfg(iterations=2, checkpoint_every=1)
    params, curve = train(cfg, ClusterConfig(), TINY_WORKLOAD, out_dir=str(tmp_path))
    assert len(curve) == 2
    assert (tmp_path / "checkpoint_0001.bin").exists()
    assert (tmp_path / "checkpoint_0002.bin").exists()
    with open(tmp_path / "curve.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "mean_return", "mean_norm_edp", "esjf_reference_edp"]
    assert len(rows) == 3
    for i, row in enumerate(rows[1:]):
        assert int(row[0]) == i
        assert math.isfinite(float(row[1]))
        assert float(row[2]) > 0
        assert float(row[3]) > 0
        assert float(row[1]) == curve[i].mean_return
        assert float(row[2]) == curve[i].mean_normalized_edp
    loaded, _ = load_checkpoint(tmp_path / "checkpoint_final.bin")
    for got, exp in zip(loaded.blocks(), params.blocks()):
        np.testing.assert_array_equal(got, exp)


def test_train_full_run_reproducible():
    cfg = small_cfg(iterations=2)
    outs = []
    for _ in range(2):
        params, curve = train(cfg, ClusterConfig(), TINY_WORKLOAD)
        outs.append((params, curve))
    for b0, b1 in zip(outs[0][0].blocks(), outs[1][0].blocks()):
        np.testing.assert_array_equal(b0, b1)
    assert [(p.mean_return, p.mean_normalized_edp) for p in outs[0][1]] == \
           [(p.mean_return, p.mean_normalized_edp) for p in outs[1][1]]
