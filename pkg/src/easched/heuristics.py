"""Baseline schedulers and a brute-force optimum for tiny instances.

The flagship baseline greedily places whichever (queued job, machine) pair
currently has the lowest estimated normalized energy-delay product, where the
delay estimate includes the queueing offset the fit check reports.  A random
policy and an energy-only greedy variant round out the comparison set, and an
exhaustive search over machine assignments and service orders provides ground
truth on instances small enough to enumerate.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import UsageError
from .simenv import ClusterConfig, ClusterSim
from .workload import JobArrivalSequence

HEURISTIC_KINDS = ("esjf", "random", "greedy_energy")


def edp_estimate(env: ClusterSim, job_id: int, machine: int, offset: int) -> float:
    """Estimated normalized EDP of placing the job on this machine now.

    Energy uses the machine's expected duration; delay is queueing offset
    plus expected duration, both normalized by the job's fastest expected
    duration.
    """
    rec = env.records[job_id]
    mu_k = rec.expected_durs[machine]
    rate = env.cluster.machines[machine].energy_rate
    energy = rec.job.procs * rate * mu_k / rec.mu_star
    return energy * ((offset + mu_k) / rec.mu_star)


def energy_estimate(env: ClusterSim, job_id: int, machine: int) -> float:
    rec = env.records[job_id]
    rate = env.cluster.machines[machine].energy_rate
    return rec.job.procs * rate * rec.expected_durs[machine] / rec.mu_star


def best_placement(env: ClusterSim, score) -> Optional[tuple[int, int, float]]:
    """Feasible (slot, machine) minimizing score(job_id, machine, offset).

    Ties break toward the lower slot, then the lower machine index.
    """
    best = None
    for slot, job_id in enumerate(env.queue):
        for k in range(env.cluster.num_machines):
            offset = env.fit_offset(k, job_id)
            if offset is None:
                continue
            value = score(job_id, k, offset)
            if best is None or value < best[2]:
                best = (slot, k, value)
    return best


def esjf_pick(env: ClusterSim) -> Optional[tuple[int, int, float]]:
    """The next placement the energy-aware shortest-job-first rule makes."""
    return best_placement(env, lambda j, k, off: edp_estimate(env, j, k, off))


def esjf_step(env: ClusterSim) -> list[int]:
    """Run one full timestep of the greedy rule on the environment.

    Estimates are re-evaluated after every placement (placements change both
    fits and offsets); the closing hold advances time.  Returns the action
    indices applied, the hold included.
    """
    actions = []
    while True:
        pick = esjf_pick(env)
        if pick is None:
            break
        slot, machine, _ = pick
        action = env.cluster.encode_action(machine, slot)
        env.step(action)
        actions.append(action)
    actions.append(env.cluster.hold_action)
    env.step(env.cluster.hold_action)
    return actions


def greedy_energy_step(env: ClusterSim) -> list[int]:
    """Like esjf_step but scoring placements by estimated energy alone."""
    actions = []
    while True:
        pick = best_placement(env, lambda j, k, off: energy_estimate(env, j, k))
        if pick is None:
            break
        slot, machine, _ = pick
        action = env.cluster.encode_action(machine, slot)
        env.step(action)
        actions.append(action)
    actions.append(env.cluster.hold_action)
    env.step(env.cluster.hold_action)
    return actions


def run_heuristic(kind: str, seq: JobArrivalSequence,
                  cluster: Optional[ClusterConfig] = None, seed: int = 0):
    """Drive a full episode under a named heuristic; returns a Trajectory
    with the same accounting as policy episodes."""
    from .training import run_episode

    if kind == "esjf":
        policy = lambda env, rng: _stepper_policy(env, esjf_pick)
    elif kind == "greedy_energy":
        policy = lambda env, rng: _stepper_policy(
            env, lambda e: best_placement(e, lambda j, k, off: energy_estimate(e, j, k)))
    elif kind == "random":
        policy = lambda env, rng: int(rng.integers(0, env.cluster.num_actions))
    else:
        raise UsageError(f"unknown heuristic {kind!r}; expected one of {HEURISTIC_KINDS}")
    return run_episode(policy, seq, cluster, seed)


def _stepper_policy(env: ClusterSim, pick) -> int:
    choice = pick(env)
    if choice is None:
        return env.cluster.hold_action
    slot, machine, _ = choice
    return env.cluster.encode_action(machine, slot)


# -- exhaustive optimum ------------------------------------------------------

@dataclass(frozen=True)
class OraclePlacement:
    job_id: int
    machine: int
    start_t: int
    completion_t: int
    edp: float


@dataclass(frozen=True)
class OracleSchedule:
    total_edp: float
    placements: tuple[OraclePlacement, ...]


def brute_force_optimal(seq: JobArrivalSequence,
                        cluster: Optional[ClusterConfig] = None,
                        max_jobs: int = 4) -> OracleSchedule:
    """Minimum total normalized EDP over every machine assignment and every
    service order, with each job started as early as capacity allows.

    Earliest-start schedules over all orders cover the active schedules, and
    a sum of per-job costs nondecreasing in completion time always has an
    active optimum, so the search is exhaustive for this objective.  Only
    exact durations are supported: with stochastic durations the instance
    value would itself be a random variable.
    """
    cluster = cluster if cluster is not None else ClusterConfig()
    cluster.validate()
    seq.validate()
    jobs = seq.jobs
    if len(jobs) > max_jobs:
        raise UsageError(f"oracle accepts at most {max_jobs} jobs, got {len(jobs)}")
    if not math.isinf(seq.config.estimator_accuracy):
        raise UsageError("oracle requires exact durations (estimator_accuracy = inf)")
    machines = cluster.machines
    capacity = cluster.procs_per_machine
    for job in jobs:
        if job.procs > capacity:
            raise UsageError(f"job {job.job_id} cannot fit on any machine")
    if not jobs:
        return OracleSchedule(0.0, ())
    durs = [[job.base_duration * m.duration_scale for m in machines] for job in jobs]
    mu_star = [min(d) for d in durs]
    span = max(j.arrival_t for j in jobs) + sum(max(d) for d in durs) + 1
    best_total = math.inf
    best: tuple = ()
    for assignment in itertools.product(range(len(machines)), repeat=len(jobs)):
        for order in itertools.permutations(range(len(jobs))):
            usage = np.zeros((len(machines), span), dtype=np.int64)
            total = 0.0
            placements = []
            for idx in order:
                job = jobs[idx]
                k = assignment[idx]
                dur = durs[idx][k]
                start = job.arrival_t
                lane = usage[k]
                while lane[start:start + dur].max(initial=0) + job.procs > capacity:
                    start += 1
                lane[start:start + dur] += job.procs
                energy = job.procs * machines[k].energy_rate * dur / mu_star[idx]
                delay = start + dur - job.arrival_t
                edp = energy * (delay / mu_star[idx])
                total += edp
                placements.append(OraclePlacement(job.job_id, k, start, start + dur, edp))
                if total >= best_total:
                    break
            else:
                best_total = total
                best = tuple(sorted(placements, key=lambda p: p.job_id))
    return OracleSchedule(best_total, best)
