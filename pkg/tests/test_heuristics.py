"""Baseline schedulers and the exhaustive-search ground truth."""

import itertools

import numpy as np
import pytest

from easched.errors import UsageError
from easched.heuristics import (
    best_placement,
    brute_force_optimal,
    edp_estimate,
    energy_estimate,
    esjf_pick,
    esjf_step,
    run_heuristic,
)
from easched.metrics import (
    average_normalized_edp,
    conserving_analysis,
    outcomes_from_records,
)
from easched.simenv import ClusterConfig, ClusterSim
from easched.workload import (
    JobArrivalSequence,
    JobSpec,
    WorkloadConfig,
    generate_sequence,
)


def make_seq(jobs, accuracy=float("inf"), window=60, lam=0.7, seed=0):
    cfg = WorkloadConfig(arrival_rate=lam, estimator_accuracy=accuracy,
                         arrival_window=window, short_mu_range=(1, 5),
                         long_mu_range=(6, 20), seed=seed)
    specs = tuple(JobSpec(job_id=i, arrival_t=a, procs=n, base_duration=mu, is_short=mu <= 5)
                  for i, (a, n, mu) in enumerate(jobs))
    return JobArrivalSequence(config=cfg, jobs=specs)


def test_edp_estimate_matches_hand_arithmetic():
    env = ClusterSim(make_seq([(0, 2, 3)]))
    # machine 0: mu=3, energy 2*9.809*3/3 = 19.618, delay (0+3)/3 -> 19.618
    assert edp_estimate(env, 0, 0, 0) == pytest.approx(2 * 9.809, rel=1e-12)
    # machine 1: mu=6, energy 2*1*6/3 = 4, delay (0+6)/3 = 2 -> 8
    assert edp_estimate(env, 0, 1, 0) == pytest.approx(8.0, rel=1e-12)
    # a queueing offset stretches only the delay factor
    assert edp_estimate(env, 0, 1, 3) == pytest.approx(4.0 * 3.0, rel=1e-12)
    assert energy_estimate(env, 0, 1) == pytest.approx(4.0, rel=1e-12)


def test_esjf_prefers_slow_machine_when_cheaper():
    # one 1-processor short job: slow machine wins 4 < 9.809
    env = ClusterSim(make_seq([(0, 1, 1)]))
    slot, machine, value = esjf_pick(env)
    assert (slot, machine) == (0, 1)
    assert value == pytest.approx(1 * 1.0 * 2 * 2, rel=1e-12)


def test_esjf_tie_breaks_lower_slot_then_lower_machine():
    # two identical jobs: the first queue slot must win
    env = ClusterSim(make_seq([(0, 1, 1), (0, 1, 1)]))
    slot, machine, _ = esjf_pick(env)
    assert (slot, machine) == (0, 1)


def test_esjf_step_places_all_then_holds():
    env = ClusterSim(make_seq([(0, 4, 2), (0, 4, 2), (0, 4, 2)]))
    actions = esjf_step(env)
    assert actions[-1] == env.cluster.hold_action
    assert len(actions) == 4
    assert env.clock == 1


def test_esjf_empty_queue_holds():
    env = ClusterSim(make_seq([]))
    assert esjf_pick(env) is None
    assert esjf_step(env) == [env.cluster.hold_action]


def test_esjf_three_job_golden_trace():
    # jobs at t=0: A(n=6, mu=2), B(n=6, mu=2), C(n=1, mu=12)
    # estimates at t=0 (offset 0 everywhere):
    #   A fast: 6*9.809*2/2 * (2/2) = 58.854   A slow: 6*1*4/2 * (4/2) = 24
    #   C fast: 1*9.809*12/12 * 1 = 9.809      C slow: 1*24/12 * 2 = 4
    # C -> slow (4); then A -> slow (24, still fits beside C); then B:
    #   slow now full for 4 rows -> offset 4: 12*(4+4)/2 = 48 vs fast 58.854
    env = ClusterSim(make_seq([(0, 6, 2), (0, 6, 2), (0, 1, 12)]))
    trace = []
    while not env.is_terminal():
        pick = esjf_pick(env)
        if pick is None:
            env.step(env.cluster.hold_action)
            continue
        slot, machine, value = pick
        trace.append((env.queue[slot], machine, round(value, 6)))
        env.step(env.cluster.encode_action(machine, slot))
    assert trace == [(2, 1, 4.0), (0, 1, 24.0), (1, 1, 48.0)]


def test_esjf_is_work_and_ed_conserving():
    for seed in range(6):
        seq = generate_sequence(WorkloadConfig(seed=seed))
        traj = run_heuristic("esjf", seq, seed=seed)
        report = conserving_analysis(traj)
        assert report.frac_not_work_conserving == 0.0
        assert report.frac_not_ed_conserving == 0.0
        assert not traj.truncated


def test_heuristics_deterministic_per_seed():
    seq = generate_sequence(WorkloadConfig(seed=3))
    for kind in ("esjf", "random", "greedy_energy"):
        a = run_heuristic(kind, seq, seed=11)
        b = run_heuristic(kind, seq, seed=11)
        assert np.array_equal(a.actions, b.actions)
        assert a.total_return == b.total_return


def test_random_policy_worse_than_esjf_on_average():
    esjf_mean = []
    rand_mean = []
    for seed in range(5):
        seq = generate_sequence(WorkloadConfig(seed=seed))
        esjf_mean.append(average_normalized_edp(
            run_heuristic("esjf", seq, seed=seed).job_outcomes))
        rand_mean.append(average_normalized_edp(
            run_heuristic("random", seq, seed=seed).job_outcomes))
    assert np.mean(rand_mean) > np.mean(esjf_mean)


def test_greedy_energy_ignores_queueing_delay():
    # slow machine saturated by a long resident job: energy greed still
    # queues behind it, the EDP rule switches to the fast machine
    env_setup = make_seq([(0, 10, 10), (1, 10, 2)])
    env = ClusterSim(env_setup)
    env.step(env.cluster.encode_action(1, 0))   # resident job -> slow machine
    env.step(env.cluster.hold_action)           # t=1, second job arrives
    pick_energy = best_placement(env, lambda j, k, off: energy_estimate(env, j, k))
    pick_edp = esjf_pick(env)
    assert pick_energy[1] == 1                  # cheaper energy, huge offset
    assert pick_edp[1] == 0                     # EDP sees the wait


def test_run_heuristic_unknown_kind():
    seq = make_seq([(0, 1, 1)])
    with pytest.raises(UsageError):
        run_heuristic("fifo", seq)


# -- the exhaustive oracle ----------------------------------------------------

def test_oracle_single_job_picks_global_best():
    # n=1 mu=2: fast edp 9.809*2/2*(2/2)=9.809, slow 1*4/2*(4/2)=4
    sched = brute_force_optimal(make_seq([(0, 1, 2)]))
    assert sched.total_edp == pytest.approx(4.0, rel=1e-12)
    (p,) = sched.placements
    assert (p.machine, p.start_t, p.completion_t) == (1, 0, 4)


def test_oracle_heavy_job_prefers_fast_machine():
    # n=10 saturates a machine; mu=1: fast 98.09*... fast: 10*9.809*1/1*1=98.09
    # slow: 10*1*2/1*2 = 40 -> still slow. mu scaling keeps ratio, so force
    # contention: two 10-proc jobs both want slow; second must wait 2 -> oracle
    # sends one to each machine when the wait outweighs the energy gap.
    sched = brute_force_optimal(make_seq([(0, 10, 1), (0, 10, 1)]))
    # both slow: 40 + 10*2*( (2+2)/1 )... second starts t=2: edp 20*4=80 -> 120
    # split: 40 + 98.09 = 138.09 -> serialized on slow wins
    assert sched.total_edp == pytest.approx(120.0, rel=1e-12)
    machines = sorted(p.machine for p in sched.placements)
    assert machines == [1, 1]


def test_oracle_non_conflicting_jobs_decompose():
    # jobs small enough to run side by side: optimum is the sum of each
    # job's solo optimum
    seq = make_seq([(0, 3, 2), (0, 3, 4)])
    together = brute_force_optimal(seq).total_edp
    solo = (brute_force_optimal(make_seq([(0, 3, 2)])).total_edp
            + brute_force_optimal(make_seq([(0, 3, 4)])).total_edp)
    assert together == pytest.approx(solo, rel=1e-12)


def test_oracle_respects_arrival_times():
    # same job, later arrival: identical edp (delay counts from arrival)
    early = brute_force_optimal(make_seq([(0, 2, 3)]))
    late = brute_force_optimal(make_seq([(5, 2, 3)]))
    assert late.total_edp == pytest.approx(early.total_edp, rel=1e-12)
    assert late.placements[0].start_t == 5


def test_oracle_rejects_oversized_inputs():
    with pytest.raises(UsageError):
        brute_force_optimal(make_seq([(0, 1, 1)] * 5))
    with pytest.raises(UsageError):
        brute_force_optimal(make_seq([(0, 1, 1)], accuracy=4.0))


def test_oracle_empty_sequence():
    sched = brute_force_optimal(make_seq([]))
    assert sched.total_edp == 0.0
    assert sched.placements == ()


def _serial_schedule_edp(seq, order, assignment, cluster):
    """Independent re-derivation: simulate the given order/assignment with
    a plain per-timestep capacity table."""
    machines = cluster.machines
    usage = {k: {} for k in range(len(machines))}
    total = 0.0
    for idx in order:
        job = seq.jobs[idx]
        k = assignment[idx]
        dur = job.base_duration * machines[k].duration_scale
        mu_star = min(job.base_duration * m.duration_scale for m in machines)
        start = job.arrival_t
        while any(usage[k].get(t, 0) + job.procs > cluster.procs_per_machine
                  for t in range(start, start + dur)):
            start += 1
        for t in range(start, start + dur):
            usage[k][t] = usage[k].get(t, 0) + job.procs
        energy = job.procs * machines[k].energy_rate * dur / mu_star
        total += energy * ((start + dur - job.arrival_t) / mu_star)
    return total


def test_oracle_matches_independent_enumeration():
    """Cross-check the pruned search against a naive dictionary-based
    enumerator on randomized 3-job instances."""
    rng = np.random.default_rng(42)
    cluster = ClusterConfig()
    for trial in range(60):
        jobs = sorted(
            (int(rng.integers(0, 4)), int(rng.integers(1, 11)), int(rng.integers(1, 8)))
            for _ in range(3))
        seq = make_seq(jobs)
        best = min(
            _serial_schedule_edp(seq, order, assignment, cluster)
            for assignment in itertools.product((0, 1), repeat=3)
            for order in itertools.permutations(range(3)))
        sched = brute_force_optimal(seq, cluster)
        assert sched.total_edp == pytest.approx(best, rel=1e-12), (trial, jobs)


def test_oracle_never_beaten_by_esjf():
    """On tiny exact-duration instances the greedy rule can match but never
    beat the exhaustive optimum, and the env's accounting of the oracle's
    own schedule agrees with the oracle's arithmetic."""
    rng = np.random.default_rng(7)
    for trial in range(25):
        n_jobs = int(rng.integers(1, 5))
        arrivals = sorted(rng.choice(10, size=n_jobs, replace=False).tolist())
        jobs = [(int(arrivals[i]), int(rng.integers(1, 11)), int(rng.integers(1, 6)))
                for i in range(n_jobs)]
        seq = make_seq(jobs)
        sched = brute_force_optimal(seq)
        traj = run_heuristic("esjf", seq, seed=trial)
        esjf_total = sum(o.edp for o in traj.job_outcomes)
        assert esjf_total >= sched.total_edp - 1e-9, (trial, jobs)


def test_oracle_edp_arithmetic_matches_env_accounting():
    """Replaying an oracle schedule in the simulator reproduces the oracle's
    per-job EDP bit for bit (same float expression ordering)."""
    seq = make_seq([(0, 6, 2), (1, 6, 2), (3, 1, 4)])
    sched = brute_force_optimal(seq)
    env = ClusterSim(seq)
    placed = set()
    while not env.is_terminal():
        progressed = True
        while progressed:
            progressed = False
            for slot, job_id in enumerate(list(env.queue)):
                want = next(p for p in sched.placements if p.job_id == job_id)
                if want.start_t == env.clock and job_id not in placed:
                    offset = env.fit_offset(want.machine, job_id)
                    assert offset == 0, (job_id, offset)
                    env.step(env.cluster.encode_action(want.machine, slot))
                    placed.add(job_id)
                    progressed = True
                    break
        env.step(env.cluster.hold_action)
    by_job = {o.job_id: o for o in outcomes_from_records(env.records)}
    for p in sched.placements:
        assert by_job[p.job_id].edp == p.edp, p.job_id
    assert env.total_normalized_edp() == pytest.approx(sched.total_edp, rel=1e-12)
