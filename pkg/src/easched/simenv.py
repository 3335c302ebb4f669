"""Discrete-time cluster simulator.

Time advances in integer steps.  Within one timestep the agent may issue any
number of schedule actions (each places a queued job on a machine and costs
no time); a hold or invalid action ends the timestep, at which point running
jobs may complete, waiting jobs may start, and at most one new job may
arrive.  The per-advance reward charges every job in the system its
normalized energy rate, so the undiscounted episode return telescopes to
minus the total normalized energy-delay product of the workload.

Ground-truth dynamics use sampled durations; the rendered state image and
all fit checks use expected durations, so the agent plans on estimates and
is corrected by reality, including a one-shot term when a job is assigned
that re-prices its past waiting at the machine actually chosen.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, UsageError
from .workload import (
    JobArrivalSequence,
    JobSpec,
    MachineProfile,
    default_machines,
    duration_rng,
    min_expected_duration,
    min_energy_consumption,
    sample_actual_duration,
    validate_machines,
)


@dataclass(frozen=True)
class ClusterConfig:
    """Cluster geometry and the state-image tiling parameters."""

    machines: tuple[MachineProfile, ...] = field(default_factory=default_machines)
    procs_per_machine: int = 10
    horizon: int = 30
    queue_slots: int = 10
    backlog_len: int = 90
    last_arrival_len: int = 30
    max_episode_timesteps: int = 500

    def validate(self) -> None:
        validate_machines(self.machines)
        if self.procs_per_machine < 1 or self.horizon < 1 or self.queue_slots < 1:
            raise ConfigError("procs_per_machine, horizon and queue_slots must be >= 1")
        if self.backlog_len < 0 or self.backlog_len % self.horizon != 0:
            raise ConfigError("backlog_len must be a nonnegative multiple of horizon")
        if self.last_arrival_len < 0 or self.last_arrival_len % self.horizon != 0:
            raise ConfigError("last_arrival_len must be a nonnegative multiple of horizon")
        if self.max_episode_timesteps < 1:
            raise ConfigError("max_episode_timesteps must be >= 1")

    @property
    def num_machines(self) -> int:
        return len(self.machines)

    @property
    def num_actions(self) -> int:
        return self.queue_slots * self.num_machines + 1

    @property
    def hold_action(self) -> int:
        return self.queue_slots * self.num_machines

    @property
    def image_height(self) -> int:
        return self.horizon

    @property
    def image_width(self) -> int:
        k, n, q = self.num_machines, self.procs_per_machine, self.queue_slots
        return n * (1 + q) * k + self.backlog_len // self.horizon + self.last_arrival_len // self.horizon

    def encode_action(self, machine: int, slot: int) -> int:
        return machine * self.queue_slots + slot

    def decode_action(self, index: int) -> Optional[tuple[int, int]]:
        """(machine, slot) for schedule actions, None for hold."""
        if not 0 <= index <= self.hold_action:
            raise UsageError(f"action index {index} outside [0, {self.hold_action}]")
        if index == self.hold_action:
            return None
        return index // self.queue_slots, index % self.queue_slots


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    time_advanced: bool
    scheduled_job: Optional[int]
    completions: tuple[int, ...]
    terminal: bool


class JobRecord:
    """Ground-truth accounting for one job across its lifetime."""

    __slots__ = (
        "job", "mu_star", "min_energy", "expected_durs",
        "assigned_clock", "machine", "sampled_duration", "energy",
        "start_t", "completion_t",
    )

    def __init__(self, job: JobSpec, mu_star: int, min_energy: float,
                 expected_durs: tuple[int, ...]):
        self.job = job
        self.mu_star = mu_star
        self.min_energy = min_energy
        self.expected_durs = expected_durs
        self.assigned_clock: Optional[int] = None
        self.machine: Optional[int] = None
        self.sampled_duration: Optional[int] = None
        self.energy: Optional[float] = None
        self.start_t: Optional[int] = None
        self.completion_t: Optional[int] = None

    @property
    def delay(self) -> Optional[int]:
        if self.completion_t is None:
            return None
        return self.completion_t - self.job.arrival_t


class _Placement:
    """One job's footprint on a machine, from assignment until departure."""

    __slots__ = ("job_id", "procs", "expected_dur", "actual_dur",
                 "planned_start", "start_t")

    def __init__(self, job_id: int, procs: int, expected_dur: int,
                 actual_dur: int, planned_start: int):
        self.job_id = job_id
        self.procs = procs
        self.expected_dur = expected_dur
        self.actual_dur = actual_dur
        self.planned_start = planned_start
        self.start_t: Optional[int] = None


def earliest_fit(occupancy: np.ndarray, capacity: int, procs: int, dur: int) -> Optional[int]:
    """Smallest row offset where a procs-wide, dur-tall rectangle fits.

    occupancy holds expected busy-processor counts for the next H rows; the
    rectangle must lie entirely within the horizon.
    """
    horizon = occupancy.shape[0]
    if dur > horizon:
        return None
    ok = occupancy <= capacity - procs
    if dur == 1:
        idx = np.flatnonzero(ok)
        return int(idx[0]) if idx.size else None
    run = np.cumsum(ok)
    window = run[dur - 1:].copy()
    window[1:] -= run[:horizon - dur]
    idx = np.flatnonzero(window == dur)
    return int(idx[0]) if idx.size else None


def image_to_text(bits: np.ndarray) -> str:
    """Row-major 0/1 text dump of a state image, for golden comparisons."""
    return "\n".join("".join("1" if v else "0" for v in row) for row in bits)


class ClusterSim:
    """One episode over one job arrival sequence.

    Sampled durations are keyed by (duration_seed, job_id, machine_id), so
    two schedulers driven with the same duration_seed see identical realized
    durations for every job/machine pairing regardless of decision order.
    """

    def __init__(self, sequence: JobArrivalSequence, cluster: Optional[ClusterConfig] = None,
                 duration_seed: int = 0):
        cluster = cluster if cluster is not None else ClusterConfig()
        cluster.validate()
        sequence.validate()
        if cluster.max_episode_timesteps < sequence.config.arrival_window:
            raise ConfigError("max_episode_timesteps must cover the arrival window")
        for job in sequence.jobs:
            if job.procs > cluster.procs_per_machine:
                raise ConfigError(
                    f"job {job.job_id} demands {job.procs} processors; machines have "
                    f"{cluster.procs_per_machine}")
        self.sequence = sequence
        self.cluster = cluster
        self.duration_seed = duration_seed
        k = cluster.num_machines
        self._energy_rates = tuple(m.energy_rate for m in cluster.machines)
        self._occ_bufs = [np.zeros(cluster.horizon, dtype=np.int64) for _ in range(k)]
        self._occ_clean = [False] * k
        self._img = np.zeros((cluster.image_height, cluster.image_width), dtype=np.uint8)
        self._col_range = np.arange(cluster.procs_per_machine)
        self.reset()

    # -- lifecycle ----------------------------------------------------------

    def reset(self) -> None:
        cl = self.cluster
        self.clock = 0
        self.queue: list[int] = []
        self.backlog: deque[int] = deque()
        self.since_last_arrival = 0
        self._pending = 0
        self._running: list[list[_Placement]] = [[] for _ in range(cl.num_machines)]
        self._waiting: list[list[_Placement]] = [[] for _ in range(cl.num_machines)]
        self.records: dict[int, JobRecord] = {}
        machines = cl.machines
        for job in self.sequence.jobs:
            self.records[job.job_id] = JobRecord(
                job,
                mu_star=min_expected_duration(job, machines),
                min_energy=min_energy_consumption(job, machines),
                expected_durs=tuple(job.base_duration * m.duration_scale for m in machines),
            )
        # running charge sums make the per-advance reward O(1)
        self._placed_charge = 0.0
        self._unplaced_charge = 0.0
        self._delta_pending = 0.0
        self.total_reward = 0.0
        self.time_advances = 0
        self.decision_steps = 0
        self._occ_clean = [False] * cl.num_machines
        self._admit_arrivals()

    def _admit_arrivals(self) -> bool:
        jobs = self.sequence.jobs
        arrived = False
        while self._pending < len(jobs) and jobs[self._pending].arrival_t == self.clock:
            job = jobs[self._pending]
            self._pending += 1
            arrived = True
            if len(self.queue) < self.cluster.queue_slots:
                self.queue.append(job.job_id)
            else:
                self.backlog.append(job.job_id)
            rec = self.records[job.job_id]
            self._unplaced_charge += rec.min_energy / rec.mu_star
        return arrived

    # -- queries ------------------------------------------------------------

    def is_terminal(self) -> bool:
        if self.clock >= self.cluster.max_episode_timesteps:
            return True
        if self.clock < self.sequence.config.arrival_window:
            return False
        if self._pending < len(self.sequence.jobs) or self.queue or self.backlog:
            return False
        return not any(self._running) and not any(self._waiting)

    def expected_occupancy(self, machine: int) -> np.ndarray:
        """Busy-processor counts on this machine for the next H rows, under
        expected durations (running jobs past their estimate count 1 row)."""
        if self._occ_clean[machine]:
            return self._occ_bufs[machine]
        occ = self._occ_bufs[machine]
        occ.fill(0)
        horizon = self.cluster.horizon
        clock = self.clock
        for pl in self._running[machine]:
            hi = pl.start_t + pl.expected_dur - clock
            if hi < 1:
                hi = 1
            occ[0:min(hi, horizon)] += pl.procs
        for pl in self._waiting[machine]:
            lo = pl.planned_start - clock
            if lo < 0:
                lo = 0
            occ[lo:min(lo + pl.expected_dur, horizon)] += pl.procs
        self._occ_clean[machine] = True
        return occ

    def fit_offset(self, machine: int, job_id: int) -> Optional[int]:
        rec = self.records[job_id]
        return earliest_fit(self.expected_occupancy(machine),
                            self.cluster.procs_per_machine,
                            rec.job.procs, rec.expected_durs[machine])

    def valid_actions(self) -> list[int]:
        """Schedule actions with an occupied slot and a feasible fit, plus hold."""
        cl = self.cluster
        out = []
        for q, job_id in enumerate(self.queue):
            for k in range(cl.num_machines):
                if self.fit_offset(k, job_id) is not None:
                    out.append(cl.encode_action(k, q))
        out.append(cl.hold_action)
        return out

    def any_valid_fit(self) -> bool:
        for job_id in self.queue:
            for k in range(self.cluster.num_machines):
                if self.fit_offset(k, job_id) is not None:
                    return True
        return False

    def busy_processors(self, machine: int) -> int:
        return sum(pl.procs for pl in self._running[machine])

    def placement_snapshot(self) -> list[list[int]]:
        """Per machine, job ids currently assigned (running then waiting)."""
        return [
            [pl.job_id for pl in self._running[k]] + [pl.job_id for pl in self._waiting[k]]
            for k in range(self.cluster.num_machines)
        ]

    # -- rendering ----------------------------------------------------------

    def render(self) -> np.ndarray:
        """The H x W binary state image.

        The returned array is a reused buffer, valid until the next render
        on this instance; copy it to keep it.
        """
        cl = self.cluster
        img = self._img
        img.fill(0)
        n = cl.procs_per_machine
        horizon = cl.horizon
        # machine occupancy blocks: row r shows one 1 per expected busy
        # processor at clock+r, filled from the left
        for k in range(cl.num_machines):
            occ = self.expected_occupancy(k)
            np.greater(occ[:, None], self._col_range[None, :],
                       out=img[:, k * n:(k + 1) * n].view(bool))
        # queue profile blocks, slot-major: slot q's expected footprint on
        # each machine in turn
        base = cl.num_machines * n
        for q, job_id in enumerate(self.queue):
            rec = self.records[job_id]
            procs = rec.job.procs
            for k in range(cl.num_machines):
                col = base + (q * cl.num_machines + k) * n
                img[0:min(rec.expected_durs[k], horizon), col:col + procs] = 1
        # backlog count tiles, column-major in H-tall strips
        base += cl.queue_slots * cl.num_machines * n
        count = min(len(self.backlog), cl.backlog_len)
        for i in range(cl.backlog_len // horizon):
            amt = min(horizon, count - i * horizon)
            if amt <= 0:
                break
            img[0:amt, base + i] = 1
        # timesteps since the last arrival, same tiling
        base += cl.backlog_len // horizon
        count = min(self.since_last_arrival, cl.last_arrival_len)
        for i in range(cl.last_arrival_len // horizon):
            amt = min(horizon, count - i * horizon)
            if amt <= 0:
                break
            img[0:amt, base + i] = 1
        return img

    # -- dynamics -----------------------------------------------------------

    def step(self, action: int) -> StepOutcome:
        """Apply one agent action.

        A valid schedule action places the job and costs no time; hold and
        invalid actions advance the clock one timestep and carry the reward
        for the elapsed step.
        """
        if self.is_terminal():
            raise UsageError("step() called on a terminal episode")
        self.decision_steps += 1
        decoded = self.cluster.decode_action(action)
        if decoded is not None:
            machine, slot = decoded
            if slot < len(self.queue):
                job_id = self.queue[slot]
                offset = self.fit_offset(machine, job_id)
                if offset is not None:
                    self._assign(machine, slot, offset)
                    return StepOutcome(reward=0.0, time_advanced=False,
                                       scheduled_job=job_id, completions=(),
                                       terminal=False)
        reward, completions = self._advance_time()
        return StepOutcome(reward=reward, time_advanced=True, scheduled_job=None,
                           completions=completions, terminal=self.is_terminal())

    def _assign(self, machine: int, slot: int, offset: int) -> None:
        job_id = self.queue.pop(slot)
        if self.backlog:
            self.queue.append(self.backlog.popleft())
        rec = self.records[job_id]
        job = rec.job
        rng = duration_rng(self.duration_seed, job_id, machine)
        dur = sample_actual_duration(job, self.cluster.machines[machine],
                                     self.sequence.config.estimator_accuracy, rng)
        rec.assigned_clock = self.clock
        rec.machine = machine
        rec.sampled_duration = dur
        rec.energy = job.procs * self._energy_rates[machine] * dur / rec.mu_star
        pl = _Placement(job_id, job.procs, rec.expected_durs[machine], dur,
                        planned_start=self.clock + offset)
        if offset == 0:
            # fit at offset 0 implies free capacity now (expected row 0 counts
            # every running job at least once), so the job starts immediately
            pl.start_t = self.clock
            rec.start_t = self.clock
            self._running[machine].append(pl)
        else:
            self._waiting[machine].append(pl)
        self._occ_clean[machine] = False
        # re-price the completed wait at the machine actually chosen
        self._unplaced_charge -= rec.min_energy / rec.mu_star
        self._placed_charge += rec.energy / rec.mu_star
        self._delta_pending += (rec.energy - rec.min_energy) * (self.clock - job.arrival_t) / rec.mu_star

    def _advance_time(self) -> tuple[float, tuple[int, ...]]:
        # jobs in the system during the elapsed step are charged their rate;
        # jobs assigned this timestep additionally pay the waiting correction
        reward = -(self._placed_charge + self._unplaced_charge + self._delta_pending)
        self._delta_pending = 0.0
        self.total_reward += reward
        new_clock = self.clock + 1
        completions: list[int] = []
        capacity = self.cluster.procs_per_machine
        for k in range(self.cluster.num_machines):
            running = self._running[k]
            done = [pl for pl in running if pl.start_t + pl.actual_dur == new_clock]
            if done:
                self._running[k] = running = [pl for pl in running
                                              if pl.start_t + pl.actual_dur != new_clock]
                self._occ_clean[k] = False
                for pl in done:
                    rec = self.records[pl.job_id]
                    rec.completion_t = new_clock
                    self._placed_charge -= rec.energy / rec.mu_star
                    completions.append(pl.job_id)
            if self._waiting[k]:
                free = capacity - sum(pl.procs for pl in running)
                still_waiting = []
                for pl in self._waiting[k]:
                    if pl.procs <= free:
                        free -= pl.procs
                        pl.start_t = new_clock
                        self.records[pl.job_id].start_t = new_clock
                        running.append(pl)
                    else:
                        still_waiting.append(pl)
                if len(still_waiting) != len(self._waiting[k]):
                    self._waiting[k] = still_waiting
                    self._occ_clean[k] = False
        self.clock = new_clock
        self._occ_clean = [False] * self.cluster.num_machines
        if self._admit_arrivals():
            self.since_last_arrival = 0
        else:
            self.since_last_arrival = min(self.since_last_arrival + 1,
                                          self.cluster.last_arrival_len)
        self.time_advances += 1
        return reward, tuple(completions)

    # -- accounting ---------------------------------------------------------

    def completed_records(self) -> list[JobRecord]:
        return [r for r in self.records.values() if r.completion_t is not None]

    def total_normalized_edp(self) -> float:
        """Sum over completed jobs of E x D/mu_star, from the ground truth."""
        total = 0.0
        for rec in self.completed_records():
            total += rec.energy * (rec.delay / rec.mu_star)
        return total
