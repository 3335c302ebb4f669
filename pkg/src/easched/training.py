"""Policy-gradient training: rollout collection over sequences, cumulative
returns, a per-step baseline averaged across the trajectories of each
sequence, and seeded Adam ascent on the score-function estimator.

Seed plumbing.  Every randomized quantity is derived from one master seed
through tagged SeedSequence paths, so a full run is reproducible bit for bit
and any episode can be re-created in isolation:

    sequence pool    derive_seed(master, TAG_SEQ, s)
    episode seed     derive_seed(master, TAG_EP, iteration, s, m)
    parameter init   derive_seed(master, TAG_INIT)

and inside one episode the seed splits again into a duration stream
(TAG_DUR) and an action-sampling stream (TAG_ACT).  Baseline schedulers
driven with the same episode seed therefore see the same realized duration
for every (job, machine) pairing the simulator samples.
"""

from __future__ import annotations

import csv
import math
import multiprocessing
import os
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, UsageError
from .heuristics import run_heuristic
from .metrics import JobOutcome, outcomes_from_records
from .policy import (
    AdamState,
    PolicyLayout,
    PolicyParams,
    accumulate_logit_gradient,
    accumulate_policy_gradient,
    adam_init,
    adam_update,
    forward,
    forward_batch,
    greedy_action,
    init_params,
    sample_action,
    save_checkpoint,
    zero_params,
)
from .simenv import ClusterConfig, ClusterSim
from .workload import JobArrivalSequence, WorkloadConfig, derive_seed, generate_sequence

TAG_DUR = 1
TAG_ACT = 2
TAG_SEQ = 3
TAG_EP = 4
TAG_INIT = 5

GRAD_CHUNK = 128


@dataclass
class TrainConfig:
    """Knobs of the update loop.  sequences_per_iter is S, the number of
    arrival sequences per iteration; trajectories_per_sequence is M."""

    sequences_per_iter: int = 20
    trajectories_per_sequence: int = 10
    iterations: int = 300
    gamma: float = 1.0
    lr: float = 0.001
    eval_mode: str = "greedy"
    seed: int = 0
    fixed_pool: bool = True
    entropy_bonus: float = 0.0
    grad_clip: float = 0.0
    checkpoint_every: int = 0
    esjf_reference: bool = True
    threads: int = 1

    def validate(self) -> None:
        if self.sequences_per_iter < 1 or self.trajectories_per_sequence < 1:
            raise ConfigError("sequences_per_iter and trajectories_per_sequence must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if self.eval_mode not in ("sampled", "greedy"):
            raise ConfigError(f"eval_mode must be 'sampled' or 'greedy', got {self.eval_mode!r}")
        if self.entropy_bonus < 0.0 or self.grad_clip < 0.0:
            raise ConfigError("entropy_bonus and grad_clip must be >= 0")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass(eq=False)
class Trajectory:
    """One finished episode: per-decision-step actions and rewards, the
    completed-job outcomes, and (when collected) the packed state images and
    rollout action distributions needed to rebuild the policy gradient."""

    sequence: JobArrivalSequence
    cluster: ClusterConfig
    duration_seed: int
    actions: np.ndarray
    rewards: np.ndarray
    total_return: float
    truncated: bool
    final_clock: int
    job_outcomes: tuple[JobOutcome, ...]
    obs_packed: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None

    @property
    def num_steps(self) -> int:
        return len(self.actions)

    def total_normalized_edp(self) -> float:
        return sum(o.edp for o in self.job_outcomes)

    def unpack_observations(self) -> np.ndarray:
        """Rebuild the (steps, height, width) binary image stack."""
        if self.obs_packed is None:
            raise UsageError("trajectory was collected without observations")
        h, w = self.cluster.image_height, self.cluster.image_width
        flat = np.unpackbits(self.obs_packed, axis=1, count=h * w)
        return flat.reshape(self.obs_packed.shape[0], h, w)


def _finish_trajectory(env: ClusterSim, actions, rewards, obs_rows, prob_rows) -> Trajectory:
    outcomes = outcomes_from_records(env.records)
    packed = None
    if obs_rows is not None:
        bits = (env.cluster.image_height * env.cluster.image_width + 7) // 8
        packed = (np.stack(obs_rows) if obs_rows
                  else np.zeros((0, bits), dtype=np.uint8))
    probs = None
    if prob_rows is not None:
        probs = (np.stack(prob_rows) if prob_rows
                 else np.zeros((0, env.cluster.num_actions)))
    return Trajectory(
        sequence=env.sequence,
        cluster=env.cluster,
        duration_seed=env.duration_seed,
        actions=np.asarray(actions, dtype=np.int64),
        rewards=np.asarray(rewards, dtype=np.float64),
        total_return=env.total_reward,
        truncated=len(outcomes) < len(env.sequence.jobs),
        final_clock=env.clock,
        job_outcomes=outcomes,
        obs_packed=packed,
        probs=probs,
    )


def run_episode(policy, sequence: JobArrivalSequence,
                cluster: Optional[ClusterConfig] = None, seed: int = 0,
                mode: str = "sampled", collect_obs: bool = False) -> Trajectory:
    """Play one episode to termination and return its trajectory.

    policy is either PolicyParams (states are rendered and fed through the
    network) or a callable (env, rng) -> action for scripted schedulers.
    collect_obs stores bit-packed state images and, for network policies,
    the action distributions, for later gradient accumulation.
    """
    if mode not in ("sampled", "greedy"):
        raise UsageError(f"mode must be 'sampled' or 'greedy', got {mode!r}")
    env = ClusterSim(sequence, cluster, derive_seed(seed, TAG_DUR))
    rng = np.random.default_rng(derive_seed(seed, TAG_ACT))
    use_net = isinstance(policy, PolicyParams)
    actions: list[int] = []
    rewards: list[float] = []
    obs_rows = [] if collect_obs else None
    prob_rows = [] if (collect_obs and use_net) else None
    while not env.is_terminal():
        if use_net:
            img = env.render()
            probs = forward(policy, img)
            action = greedy_action(probs) if mode == "greedy" else sample_action(probs, rng)
            if collect_obs:
                obs_rows.append(np.packbits(img, axis=None))
                prob_rows.append(probs)
        else:
            if collect_obs:
                obs_rows.append(np.packbits(env.render(), axis=None))
            action = policy(env, rng)
        out = env.step(action)
        actions.append(action)
        rewards.append(out.reward)
    return _finish_trajectory(env, actions, rewards, obs_rows, prob_rows)


def rollout_groups(params: PolicyParams,
                   sequence_seed_pairs: Sequence[tuple[JobArrivalSequence, Sequence[int]]],
                   cluster: Optional[ClusterConfig] = None,
                   mode: str = "sampled", collect_obs: bool = True) -> list[list[Trajectory]]:
    """Play every (sequence, episode seed) episode in lockstep, batching the
    network forward across all environments still running.  Each episode is
    the same computation run_episode performs for its seed; batching them
    keeps the dense layer's weight streaming amortized over the whole group.
    Returns one trajectory list per input pair, in order."""
    if mode not in ("sampled", "greedy"):
        raise UsageError(f"mode must be 'sampled' or 'greedy', got {mode!r}")
    cluster = cluster if cluster is not None else ClusterConfig()
    envs: list[ClusterSim] = []
    rngs: list[np.random.Generator] = []
    sizes: list[int] = []
    for sequence, seeds in sequence_seed_pairs:
        sizes.append(len(seeds))
        for s in seeds:
            envs.append(ClusterSim(sequence, cluster, derive_seed(s, TAG_DUR)))
            rngs.append(np.random.default_rng(derive_seed(s, TAG_ACT)))
    n = len(envs)
    actions: list[list[int]] = [[] for _ in range(n)]
    rewards: list[list[float]] = [[] for _ in range(n)]
    obs_rows = [[] for _ in range(n)] if collect_obs else [None] * n
    prob_rows = [[] for _ in range(n)] if collect_obs else [None] * n
    live = [i for i in range(n) if not envs[i].is_terminal()]
    while live:
        imgs = np.stack([envs[i].render() for i in live])
        dists = forward_batch(params, imgs)
        nxt = []
        for row, i in enumerate(live):
            p = dists[row]
            action = greedy_action(p) if mode == "greedy" else sample_action(p, rngs[i])
            if collect_obs:
                obs_rows[i].append(np.packbits(imgs[row], axis=None))
                prob_rows[i].append(p)
            out = envs[i].step(action)
            actions[i].append(action)
            rewards[i].append(out.reward)
            if not out.terminal:
                nxt.append(i)
        live = nxt
    trajs = [_finish_trajectory(envs[i], actions[i], rewards[i], obs_rows[i], prob_rows[i])
             for i in range(n)]
    grouped = []
    at = 0
    for size in sizes:
        grouped.append(trajs[at:at + size])
        at += size
    return grouped


def rollout_group(params: PolicyParams, sequence: JobArrivalSequence,
                  cluster: Optional[ClusterConfig], episode_seeds: Sequence[int],
                  mode: str = "sampled", collect_obs: bool = True) -> list[Trajectory]:
    """Lockstep episodes of a single sequence; see rollout_groups."""
    return rollout_groups(params, [(sequence, episode_seeds)], cluster,
                          mode=mode, collect_obs=collect_obs)[0]


# -- returns and baselines ----------------------------------------------------

def compute_returns(trajectory_or_rewards, gamma: float = 1.0) -> np.ndarray:
    """Per-step cumulative discounted reward v_t = sum_{i>=t} gamma^(i-t) r_i."""
    rewards = getattr(trajectory_or_rewards, "rewards", trajectory_or_rewards)
    r = np.asarray(rewards, dtype=np.float64)
    if gamma == 1.0:
        return np.cumsum(r[::-1])[::-1].copy()
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def compute_baselines(returns_per_traj: Sequence[np.ndarray]) -> np.ndarray:
    """Per-step mean of the returns, over the trajectories that reach each
    step; length equals the longest trajectory."""
    if not returns_per_traj:
        raise UsageError("compute_baselines needs at least one trajectory")
    t_max = max(len(v) for v in returns_per_traj)
    if t_max == 0:
        return np.zeros(0)
    padded = np.full((len(returns_per_traj), t_max), np.nan)
    for i, v in enumerate(returns_per_traj):
        padded[i, :len(v)] = v
    return np.nanmean(padded, axis=0)


def _entropy_dlogits(probs: np.ndarray) -> np.ndarray:
    """Gradient of the per-step entropy with respect to the logits."""
    plogp = np.where(probs > 0.0, probs * np.log(np.maximum(probs, 1e-300)), 0.0)
    entropy = -plogp.sum(axis=1, keepdims=True)
    return -(plogp + probs * entropy)


def _sequence_gradient(params: PolicyParams, trajs: Sequence[Trajectory],
                       gamma: float, entropy_bonus: float) -> PolicyParams:
    """Unscaled policy-gradient contribution of one sequence's trajectories,
    with the group baseline already subtracted."""
    grads = zero_params(params.layout)
    returns = [compute_returns(t.rewards, gamma) for t in trajs]
    base = compute_baselines(returns)
    for traj, v in zip(trajs, returns):
        if traj.num_steps == 0:
            continue
        imgs = traj.unpack_observations()
        coeffs = v - base[:len(v)]
        accumulate_policy_gradient(params, grads, imgs, traj.actions, coeffs,
                                   probs=traj.probs, chunk=GRAD_CHUNK)
        if entropy_bonus > 0.0:
            accumulate_logit_gradient(params, grads, imgs,
                                      entropy_bonus * _entropy_dlogits(traj.probs),
                                      chunk=GRAD_CHUNK)
    return grads


# -- the update loop ----------------------------------------------------------

@dataclass(frozen=True)
class IterationStats:
    iteration: int
    mean_return: float
    mean_normalized_edp: float
    esjf_reference_edp: float
    truncated_episodes: int
    completed_jobs: int


@dataclass(frozen=True)
class LearningCurvePoint:
    iteration: int
    mean_normalized_edp: float
    mean_return: float
    esjf_reference_edp: float
    wall_time: float


def _pool_task(shard: Sequence[tuple[int, Sequence[int]]]):
    ctx = _POOL_CTX
    return _shard_pass(ctx["params"], ctx["sequences"], ctx["cluster"], shard, ctx["cfg"])


_POOL_CTX: dict = {}


def _shard_pass(params, sequences, cluster, shard, cfg):
    """Rollouts, per-sequence gradients, and bookkeeping for a contiguous
    slice of the iteration's sequences.

    All of the shard's episodes roll out in one lockstep batch; gradients
    and statistics are then produced sequence by sequence.  The matched
    reference heuristic replays one episode seed per sequence, so its
    durations pair with the first sampled trajectory's.
    """
    groups = rollout_groups(params, [(sequences[s], seeds) for s, seeds in shard],
                            cluster, mode="sampled", collect_obs=True)
    out = []
    for (s_idx, seeds), trajs in zip(shard, groups):
        grads = _sequence_gradient(params, trajs, cfg.gamma, cfg.entropy_bonus)
        esjf_sum = 0.0
        esjf_jobs = 0
        if cfg.esjf_reference:
            ref = run_heuristic("esjf", sequences[s_idx], cluster, seeds[0])
            esjf_sum = sum(o.edp for o in ref.job_outcomes)
            esjf_jobs = len(ref.job_outcomes)
        tally = (sum(t.total_return for t in trajs), len(trajs),
                 sum(o.edp for t in trajs for o in t.job_outcomes),
                 sum(len(t.job_outcomes) for t in trajs),
                 sum(t.truncated for t in trajs), esjf_sum, esjf_jobs)
        out.append((s_idx, tuple(grads.blocks()), tally))
    return out


def train_iteration(params: PolicyParams, adam: AdamState,
                    sequences: Sequence[JobArrivalSequence], cfg: TrainConfig,
                    cluster: Optional[ClusterConfig] = None,
                    iteration: int = 0) -> IterationStats:
    """One REINFORCE update over S sequences x M trajectories, in place.

    Per-sequence gradients are always accumulated separately and reduced in
    sequence order, so the reduction is identical no matter how the
    sequences are spread over worker processes.
    """
    cfg.validate()
    if len(sequences) != cfg.sequences_per_iter:
        raise UsageError(f"expected {cfg.sequences_per_iter} sequences, got {len(sequences)}")
    m = cfg.trajectories_per_sequence
    tasks = [(s, tuple(derive_seed(cfg.seed, TAG_EP, iteration, s, mi) for mi in range(m)))
             for s in range(len(sequences))]
    threads = min(cfg.threads, len(tasks))
    results: list = [None] * len(sequences)
    if threads > 1:
        if "fork" not in multiprocessing.get_all_start_methods():
            raise ConfigError("threads > 1 requires fork-based multiprocessing")
        bounds = np.linspace(0, len(tasks), threads + 1).astype(int)
        shards = [tasks[bounds[i]:bounds[i + 1]] for i in range(threads)]
        _POOL_CTX.update(params=params, sequences=tuple(sequences),
                         cluster=cluster, cfg=cfg)
        with multiprocessing.get_context("fork").Pool(threads) as pool:
            for part in pool.map(_pool_task, shards):
                for s_idx, blocks, tally in part:
                    results[s_idx] = (blocks, tally)
    else:
        for s_idx, blocks, tally in _shard_pass(params, sequences, cluster, tasks, cfg):
            results[s_idx] = (blocks, tally)

    total = zero_params(params.layout)
    sum_return = sum_edp = esjf_sum = 0.0
    n_trajs = n_jobs = n_trunc = esjf_jobs = 0
    for blocks, tally in results:
        for acc, block in zip(total.blocks(), blocks):
            acc += block
        sum_return += tally[0]
        n_trajs += tally[1]
        sum_edp += tally[2]
        n_jobs += tally[3]
        n_trunc += tally[4]
        esjf_sum += tally[5]
        esjf_jobs += tally[6]
    total.scale(1.0 / (len(sequences) * m))
    if cfg.grad_clip > 0.0:
        norm = math.sqrt(sum(float(np.sum(b * b)) for b in total.blocks()))
        if norm > cfg.grad_clip:
            total.scale(cfg.grad_clip / norm)
    adam_update(params, adam, total, cfg.lr)
    return IterationStats(
        iteration=iteration,
        mean_return=sum_return / n_trajs,
        mean_normalized_edp=sum_edp / n_jobs if n_jobs else math.nan,
        esjf_reference_edp=esjf_sum / esjf_jobs if esjf_jobs else math.nan,
        truncated_episodes=n_trunc,
        completed_jobs=n_jobs,
    )


def training_pool(cfg: TrainConfig, workload_cfg: WorkloadConfig,
                  iteration: int = 0) -> list[JobArrivalSequence]:
    """The S arrival sequences used for an iteration: a fixed pool by
    default, or freshly drawn per iteration."""
    out = []
    for s in range(cfg.sequences_per_iter):
        parts = (cfg.seed, TAG_SEQ, s) if cfg.fixed_pool else (cfg.seed, TAG_SEQ, iteration, s)
        out.append(generate_sequence(replace(workload_cfg, seed=derive_seed(*parts))))
    return out


def train(cfg: TrainConfig, cluster: Optional[ClusterConfig] = None,
          workload_cfg: Optional[WorkloadConfig] = None,
          out_dir: Optional[str] = None,
          progress: Optional[Callable[[LearningCurvePoint], None]] = None,
          ) -> tuple[PolicyParams, list[LearningCurvePoint]]:
    """Full training run; returns final parameters and the learning curve.

    With out_dir set, the curve is appended to curve.csv as it grows,
    checkpoints land every checkpoint_every iterations, and the final
    parameters are always saved as checkpoint_final.bin.
    """
    cfg.validate()
    cluster = cluster if cluster is not None else ClusterConfig()
    workload_cfg = workload_cfg if workload_cfg is not None else WorkloadConfig()
    layout = PolicyLayout.for_cluster(cluster)
    params = init_params(layout, derive_seed(cfg.seed, TAG_INIT))
    adam = adam_init(layout)
    sequences = training_pool(cfg, workload_cfg)
    curve: list[LearningCurvePoint] = []
    writer = fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "curve.csv"), "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(("iteration", "mean_return", "mean_norm_edp", "esjf_reference_edp"))
        fh.flush()
    t0 = time.perf_counter()
    try:
        for it in range(cfg.iterations):
            if not cfg.fixed_pool:
                sequences = training_pool(cfg, workload_cfg, iteration=it)
            stats = train_iteration(params, adam, sequences, cfg, cluster, iteration=it)
            point = LearningCurvePoint(
                iteration=it,
                mean_normalized_edp=stats.mean_normalized_edp,
                mean_return=stats.mean_return,
                esjf_reference_edp=stats.esjf_reference_edp,
                wall_time=time.perf_counter() - t0,
            )
            curve.append(point)
            if writer is not None:
                writer.writerow((it, repr(point.mean_return),
                                 repr(point.mean_normalized_edp),
                                 repr(point.esjf_reference_edp)))
                fh.flush()
            if progress is not None:
                progress(point)
            if out_dir is not None and cfg.checkpoint_every > 0 and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"checkpoint_{it + 1:04d}.bin"),
                                params, adam)
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "checkpoint_final.bin"), params, adam)
    return params, curve
