"""Evaluation quantities: per-job normalized EDP, conserving-behavior
fractions, empirical CDFs, and the relative-improvement comparison.

The conserving analysis replays a finished trajectory action by action in a
fresh environment (same sequence, same duration seed, so the replay is
exact) and inspects each decision in context: a scheduled job is checked
against the machine a greedy estimate would have picked, and every time
advance is checked for placements the agent left on the table.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import UsageError
from .heuristics import edp_estimate
from .simenv import ClusterSim


@dataclass(frozen=True)
class JobOutcome:
    """Ground-truth cost of one completed job."""

    job_id: int
    arrival_t: int
    procs: int
    mu0: int
    machine: int
    energy: float
    delay: int
    delay_norm: float
    edp: float


def outcomes_from_records(records) -> tuple[JobOutcome, ...]:
    """JobOutcomes for every completed job, ordered by job id.

    Accepts either the simulator's records mapping or any iterable of
    job records; incomplete jobs are skipped.
    """
    recs = records.values() if hasattr(records, "values") else records
    out = []
    for rec in recs:
        if rec.completion_t is None:
            continue
        delay = rec.completion_t - rec.job.arrival_t
        delay_norm = delay / rec.mu_star
        out.append(JobOutcome(
            job_id=rec.job.job_id, arrival_t=rec.job.arrival_t, procs=rec.job.procs,
            mu0=rec.job.base_duration, machine=rec.machine, energy=rec.energy,
            delay=delay, delay_norm=delay_norm, edp=rec.energy * delay_norm,
        ))
    out.sort(key=lambda o: o.job_id)
    return tuple(out)


def average_normalized_edp(outcomes: Sequence[JobOutcome]) -> float:
    if not outcomes:
        raise UsageError("average_normalized_edp needs at least one outcome")
    return sum(o.edp for o in outcomes) / len(outcomes)


@dataclass(frozen=True)
class ConservingReport:
    """How far a scheduler strays from always-place-now, always-cheapest."""

    frac_not_ed_conserving: float
    frac_not_work_conserving: float
    hold_e_mu0: tuple[int, ...]
    hold_w_mu0: tuple[int, ...]
    scheduled_jobs: int
    occupied_advances: int
    declined_advances: int


def conserving_analysis(traj) -> ConservingReport:
    """Replay a trajectory and measure its conserving behavior.

    A time advance is non-work-conserving when some queued job had a valid
    fit at that instant; the fraction is over advances with any queued job.
    A placement is non-ED-conserving when a feasible machine had a strictly
    lower estimated EDP than the one chosen.  hold lists carry the fastest-
    machine expected durations of the affected jobs, each job once.
    """
    env = ClusterSim(traj.sequence, traj.cluster, traj.duration_seed)
    scheduled = 0
    not_ed: list[int] = []
    occupied = 0
    declined = 0
    held_ids: set[int] = set()
    for action in traj.actions:
        decoded = env.cluster.decode_action(int(action))
        placement = None
        if decoded is not None:
            machine, slot = decoded
            if slot < len(env.queue):
                job_id = env.queue[slot]
                offset = env.fit_offset(machine, job_id)
                if offset is not None:
                    placement = (job_id, machine, offset)
        if placement is not None:
            job_id, machine, offset = placement
            chosen = edp_estimate(env, job_id, machine, offset)
            options = []
            for k in range(env.cluster.num_machines):
                off_k = env.fit_offset(k, job_id)
                if off_k is not None:
                    options.append(edp_estimate(env, job_id, k, off_k))
            scheduled += 1
            if chosen > min(options):
                not_ed.append(job_id)
        else:
            if env.queue:
                occupied += 1
                fitting = [j for j in env.queue
                           if any(env.fit_offset(k, j) is not None
                                  for k in range(env.cluster.num_machines))]
                if fitting:
                    declined += 1
                    held_ids.update(fitting)
        env.step(int(action))
    mu0_of = {job.job_id: job.base_duration for job in traj.sequence.jobs}
    return ConservingReport(
        frac_not_ed_conserving=len(not_ed) / scheduled if scheduled else 0.0,
        frac_not_work_conserving=declined / occupied if occupied else 0.0,
        hold_e_mu0=tuple(mu0_of[j] for j in sorted(set(not_ed))),
        hold_w_mu0=tuple(mu0_of[j] for j in sorted(held_ids)),
        scheduled_jobs=scheduled,
        occupied_advances=occupied,
        declined_advances=declined,
    )


def merge_reports(reports: Sequence[ConservingReport]) -> ConservingReport:
    """Pool per-episode reports into one, weighting fractions by counts."""
    if not reports:
        raise UsageError("merge_reports needs at least one report")
    scheduled = sum(r.scheduled_jobs for r in reports)
    occupied = sum(r.occupied_advances for r in reports)
    declined = sum(r.declined_advances for r in reports)
    not_ed = sum(round(r.frac_not_ed_conserving * r.scheduled_jobs) for r in reports)
    hold_e = tuple(v for r in reports for v in r.hold_e_mu0)
    hold_w = tuple(v for r in reports for v in r.hold_w_mu0)
    return ConservingReport(
        frac_not_ed_conserving=not_ed / scheduled if scheduled else 0.0,
        frac_not_work_conserving=declined / occupied if occupied else 0.0,
        hold_e_mu0=hold_e, hold_w_mu0=hold_w,
        scheduled_jobs=scheduled, occupied_advances=occupied,
        declined_advances=declined,
    )


def cdf_points(values: Sequence[float]) -> list[tuple[float, float]]:
    """Empirical CDF as (value, fraction <= value) pairs, one per distinct
    value, ending at 1.0."""
    if len(values) == 0:
        raise UsageError("cdf_points needs at least one value")
    ordered = sorted(values)
    n = len(ordered)
    points = []
    for i, v in enumerate(ordered):
        if i + 1 == n or ordered[i + 1] != v:
            points.append((v, (i + 1) / n))
    return points


def compare_report(policy_outcomes: Sequence[JobOutcome],
                   baseline_outcomes: Sequence[JobOutcome]) -> float:
    """Relative improvement of the policy over the baseline,
    (baseline - policy) / baseline, on matching jobsets."""
    if sorted(o.job_id for o in policy_outcomes) != sorted(o.job_id for o in baseline_outcomes):
        raise UsageError("comparison requires outcomes for the same jobs")
    base = average_normalized_edp(baseline_outcomes)
    mine = average_normalized_edp(policy_outcomes)
    return (base - mine) / base


# -- file emitters -----------------------------------------------------------

OUTCOME_FIELDS = ("job_id", "arrival_t", "n", "mu0", "machine", "E", "D", "D_norm", "edp")


def write_outcomes_csv(path, outcomes: Iterable[JobOutcome],
                       sequence_ids: Iterable[int] | None = None) -> None:
    """Per-job metrics CSV; an optional parallel iterable tags each row with
    the sequence it came from."""
    rows = list(outcomes)
    seq_ids = list(sequence_ids) if sequence_ids is not None else None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = (("sequence",) if seq_ids is not None else ()) + OUTCOME_FIELDS
        writer.writerow(header)
        for i, o in enumerate(rows):
            row = [o.job_id, o.arrival_t, o.procs, o.mu0, o.machine,
                   repr(o.energy), o.delay, repr(o.delay_norm), repr(o.edp)]
            if seq_ids is not None:
                row = [seq_ids[i]] + row
            writer.writerow(row)


def write_report_json(path, mean_edp: float | None,
                      conserving: ConservingReport | None = None,
                      extra: dict | None = None) -> None:
    payload: dict = {"mean_edp": mean_edp}
    if conserving is not None:
        payload["frac_not_ed"] = conserving.frac_not_ed_conserving
        payload["frac_not_wc"] = conserving.frac_not_work_conserving
        payload["cdf_hold_e"] = (cdf_points(conserving.hold_e_mu0)
                                 if conserving.hold_e_mu0 else [])
        payload["cdf_hold_w"] = (cdf_points(conserving.hold_w_mu0)
                                 if conserving.hold_w_mu0 else [])
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_cdf_csv(path, points: Sequence[tuple[float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("value", "cumulative_fraction"))
        for value, frac in points:
            writer.writerow((value, repr(frac)))
