"""Job arrival generation plus the duration and energy models.

Jobs arrive over a fixed window as a Bernoulli process, one arrival at most
per timestep.  Each job is short or long, needs an integer number of
processors, and has an integer expected duration on the fastest machine;
slower machines stretch that duration by an integer scale.  Actual durations
are normal around the expected value with variance mu/accuracy, so a larger
accuracy coefficient means a better workload estimator (infinity = exact).

All sampling goes through numpy Generators seeded from explicit integers,
so sequences and duration draws are reproducible bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError

WORKLOAD_SCHEMA_VERSION = 1

# Normalized per-processor-per-timestep energy rates of the default pair of
# machines: the fast machine draws 9.809x the energy of the slow one, which
# in turn runs every job at twice the expected duration.
FAST_MACHINE_ENERGY_RATE = 9.809
SLOW_MACHINE_ENERGY_RATE = 1.0


def derive_seed(*parts: int) -> int:
    """Deterministically derive a child seed from integer parts.

    Used to split one master seed into independent streams (per sequence,
    per trajectory, per job/machine duration draw) without any stream
    ordering dependence.
    """
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class MachineProfile:
    """One machine class: how much it slows jobs down and what it burns.

    duration_scale multiplies a job's fastest-machine expected duration;
    exactly one machine in a cluster has scale 1.  energy_rate is the
    normalized energy drawn by one busy processor in one timestep.
    """

    machine_id: int
    duration_scale: int
    energy_rate: float

    def validate(self) -> None:
        if self.machine_id < 0:
            raise ConfigError(f"machine_id must be >= 0, got {self.machine_id}")
        if self.duration_scale < 1:
            raise ConfigError(f"duration_scale must be >= 1, got {self.duration_scale}")
        if not self.energy_rate > 0:
            raise ConfigError(f"energy_rate must be > 0, got {self.energy_rate}")


def default_machines() -> tuple[MachineProfile, MachineProfile]:
    """The two-machine heterogeneous cluster used throughout: machine 0 is
    fast and hungry, machine 1 takes twice as long at unit energy."""
    return (
        MachineProfile(machine_id=0, duration_scale=1, energy_rate=FAST_MACHINE_ENERGY_RATE),
        MachineProfile(machine_id=1, duration_scale=2, energy_rate=SLOW_MACHINE_ENERGY_RATE),
    )


def validate_machines(machines: Sequence[MachineProfile]) -> None:
    if not machines:
        raise ConfigError("need at least one machine profile")
    for idx, m in enumerate(machines):
        m.validate()
        if m.machine_id != idx:
            raise ConfigError("machine_id values must be 0..K-1 in order")
    if sum(1 for m in machines if m.duration_scale == 1) != 1:
        raise ConfigError("exactly one machine must have duration_scale 1")


@dataclass(frozen=True)
class WorkloadConfig:
    """Knobs of the arrival process.  Serialized field names follow the
    workload file schema: arrival_rate <-> "lambda", short_prob <-> "beta",
    estimator_accuracy <-> "c" (math.inf written as the string "inf")."""

    arrival_rate: float = 0.7
    short_prob: float = 0.5
    estimator_accuracy: float = 4.0
    arrival_window: int = 60
    short_mu_range: tuple[int, int] = (1, 3)
    long_mu_range: tuple[int, int] = (10, 15)
    demand_range: tuple[int, int] = (1, 10)
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.arrival_rate <= 1.0:
            raise ConfigError(f"arrival_rate must be in [0, 1], got {self.arrival_rate}")
        if not 0.0 <= self.short_prob <= 1.0:
            raise ConfigError(f"short_prob must be in [0, 1], got {self.short_prob}")
        if not (self.estimator_accuracy > 0 or math.isinf(self.estimator_accuracy)):
            raise ConfigError(f"estimator_accuracy must be > 0 or inf, got {self.estimator_accuracy}")
        if self.arrival_window < 0:
            raise ConfigError(f"arrival_window must be >= 0, got {self.arrival_window}")
        for name in ("short_mu_range", "long_mu_range", "demand_range"):
            lo, hi = getattr(self, name)
            if not (isinstance(lo, int) and isinstance(hi, int)) or lo < 1 or hi < lo:
                raise ConfigError(f"{name} must be a nonempty positive integer range, got ({lo}, {hi})")


@dataclass(frozen=True)
class JobSpec:
    """One arriving job.  procs is the processor count it holds for its whole
    run; base_duration is its expected duration on the scale-1 machine."""

    job_id: int
    arrival_t: int
    procs: int
    base_duration: int
    is_short: bool


@dataclass(frozen=True)
class JobArrivalSequence:
    config: WorkloadConfig
    jobs: tuple[JobSpec, ...]

    def validate(self) -> None:
        self.config.validate()
        prev = 0
        for job in self.jobs:
            if job.arrival_t < prev:
                raise ConfigError("job arrival times must be non-decreasing")
            if not 0 <= job.arrival_t < self.config.arrival_window:
                raise ConfigError(f"arrival_t {job.arrival_t} outside the arrival window")
            lo, hi = self.config.demand_range
            if not lo <= job.procs <= hi:
                raise ConfigError(f"job {job.job_id} demand {job.procs} outside {lo}..{hi}")
            mu_lo, mu_hi = (
                self.config.short_mu_range if job.is_short else self.config.long_mu_range
            )
            if not mu_lo <= job.base_duration <= mu_hi:
                raise ConfigError(f"job {job.job_id} duration {job.base_duration} outside its class range")
            prev = job.arrival_t


def generate_sequence(config: WorkloadConfig) -> JobArrivalSequence:
    """Draw one job arrival sequence from the configured Bernoulli process.

    Per timestep of the window: one arrival trial; on success the job's
    class, demand and expected duration are drawn in that fixed order.
    The draw order is part of the reproducibility contract.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    jobs: list[JobSpec] = []
    for t in range(config.arrival_window):
        if rng.random() >= config.arrival_rate:
            continue
        is_short = bool(rng.random() < config.short_prob)
        lo, hi = config.demand_range
        procs = int(rng.integers(lo, hi + 1))
        mu_lo, mu_hi = config.short_mu_range if is_short else config.long_mu_range
        base = int(rng.integers(mu_lo, mu_hi + 1))
        jobs.append(JobSpec(job_id=len(jobs), arrival_t=t, procs=procs,
                            base_duration=base, is_short=is_short))
    return JobArrivalSequence(config=config, jobs=tuple(jobs))


def expected_duration(job: JobSpec, machine: MachineProfile) -> int:
    """Expected duration of the job on this machine (exact integer)."""
    return job.base_duration * machine.duration_scale


def min_expected_duration(job: JobSpec, machines: Sequence[MachineProfile]) -> int:
    """Expected duration on the fastest machine; the normalizer for both the
    delay and energy of this job."""
    return min(expected_duration(job, m) for m in machines)


def _duration_draw(mu: int, accuracy: float, rng: np.random.Generator) -> float:
    """Raw (pre-rounding, pre-clamp) duration draw: Normal(mu, mu/accuracy)."""
    if math.isinf(accuracy):
        return float(mu)
    return rng.normal(mu, math.sqrt(mu / accuracy))


def sample_actual_duration(
    job: JobSpec,
    machine: MachineProfile,
    accuracy: float,
    rng: np.random.Generator,
) -> int:
    """Realized integer duration of the job on this machine.

    Normal draws are rounded to the nearest timestep and clamped to >= 1;
    with accuracy = inf the expected duration is returned exactly.
    """
    mu = expected_duration(job, machine)
    if math.isinf(accuracy):
        return mu
    draw = _duration_draw(mu, accuracy, rng)
    return max(1, int(round(draw)))


def duration_rng(duration_seed: int, job_id: int, machine_id: int) -> np.random.Generator:
    """RNG for one (job, machine) duration draw.

    Keyed by ids rather than by draw order, so two schedulers evaluated with
    the same duration_seed see identical realized durations no matter when
    or in what order they assign jobs.
    """
    return np.random.default_rng(np.random.SeedSequence([duration_seed, job_id, machine_id]))


def energy_profile(job: JobSpec, machine: MachineProfile) -> float:
    """Normalized energy rate of one processor running this job here.

    The per-job capacitance factor cancels under the normalization, so the
    rate depends on the machine only.
    """
    return machine.energy_rate


def energy_consumption(
    job: JobSpec, machine: MachineProfile, actual_duration: int,
    machines: Sequence[MachineProfile],
) -> float:
    """Normalized energy of a complete execution: procs x rate x d / mu_min."""
    mu_min = min_expected_duration(job, machines)
    return job.procs * energy_profile(job, machine) * actual_duration / mu_min


def min_energy_consumption(job: JobSpec, machines: Sequence[MachineProfile]) -> float:
    """Lowest energy any machine could spend on the job, at expected duration.

    This is the stand-in energy charged to a job while it waits unassigned.
    """
    mu_min = min_expected_duration(job, machines)
    return min(
        job.procs * energy_profile(job, m) * expected_duration(job, m) / mu_min
        for m in machines
    )


# --- workload files -------------------------------------------------------
#
# JSON lines: a header object {"schema_version": 1, "kind": "workload",
# "sequences": N} followed by one object per sequence:
#   {"schema_version": 1, "config": {...}, "jobs": [...]}
# Config keys use the wire names lambda/beta/c; c = infinity is written as
# the string "inf" to stay within strict JSON.


def _config_to_dict(config: WorkloadConfig) -> dict:
    c = config.estimator_accuracy
    return {
        "lambda": config.arrival_rate,
        "beta": config.short_prob,
        "c": "inf" if math.isinf(c) else c,
        "arrival_window": config.arrival_window,
        "short_mu_range": list(config.short_mu_range),
        "long_mu_range": list(config.long_mu_range),
        "demand_range": list(config.demand_range),
        "seed": config.seed,
    }


def _config_from_dict(d: dict) -> WorkloadConfig:
    raw_c = d["c"]
    c = math.inf if raw_c == "inf" else float(raw_c)
    return WorkloadConfig(
        arrival_rate=float(d["lambda"]),
        short_prob=float(d["beta"]),
        estimator_accuracy=c,
        arrival_window=int(d["arrival_window"]),
        short_mu_range=tuple(int(x) for x in d["short_mu_range"]),
        long_mu_range=tuple(int(x) for x in d["long_mu_range"]),
        demand_range=tuple(int(x) for x in d["demand_range"]),
        seed=int(d["seed"]),
    )


def sequence_to_dict(seq: JobArrivalSequence) -> dict:
    return {
        "schema_version": WORKLOAD_SCHEMA_VERSION,
        "config": _config_to_dict(seq.config),
        "jobs": [
            {
                "job_id": j.job_id,
                "arrival_t": j.arrival_t,
                "n": j.procs,
                "mu0": j.base_duration,
                "is_short": j.is_short,
            }
            for j in seq.jobs
        ],
    }


def sequence_from_dict(d: dict) -> JobArrivalSequence:
    if d.get("schema_version") != WORKLOAD_SCHEMA_VERSION:
        raise ConfigError(f"unsupported workload schema version: {d.get('schema_version')!r}")
    jobs = tuple(
        JobSpec(
            job_id=int(j["job_id"]),
            arrival_t=int(j["arrival_t"]),
            procs=int(j["n"]),
            base_duration=int(j["mu0"]),
            is_short=bool(j["is_short"]),
        )
        for j in d["jobs"]
    )
    seq = JobArrivalSequence(config=_config_from_dict(d["config"]), jobs=jobs)
    seq.validate()
    return seq


def save_workloads(path, sequences: Iterable[JobArrivalSequence]) -> None:
    seqs = list(sequences)
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "schema_version": WORKLOAD_SCHEMA_VERSION,
            "kind": "workload",
            "sequences": len(seqs),
        }
        fh.write(json.dumps(header) + "\n")
        for seq in seqs:
            fh.write(json.dumps(sequence_to_dict(seq)) + "\n")


def load_workloads(path) -> list[JobArrivalSequence]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ConfigError(f"{path}: empty workload file (missing header)")
    header = json.loads(lines[0])
    if header.get("kind") != "workload":
        raise ConfigError(f"{path}: not a workload file")
    if header.get("schema_version") != WORKLOAD_SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema version {header.get('schema_version')!r}")
    seqs = [sequence_from_dict(json.loads(ln)) for ln in lines[1:]]
    if header.get("sequences") != len(seqs):
        raise ConfigError(f"{path}: header promises {header.get('sequences')} sequences, found {len(seqs)}")
    return seqs
