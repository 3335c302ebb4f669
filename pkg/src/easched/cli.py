"""Command-line operator surface.

Subcommands: gen (write workload files), train (policy-gradient training),
eval (run a checkpoint on held-out workloads), compare (policy vs baseline
schedulers on paired durations), analyze (conserving-behavior report).
Everything lands in files so external tools can plot; stdout carries short
human summaries plus the effective seed for exact replay.

Configuration merges three layers: built-in defaults, an INI config file
(sections [cluster], [workload], [train], [output]), and command-line
flags.  Flags use the same names as the file keys they override.

Exit codes: 0 success, 1 usage, 2 config, 3 numeric failure, 4 I/O.
"""

import argparse
import json
import math
import sys
from configparser import ConfigParser, Error as IniError
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigError, NumericError, UsageError
from .heuristics import HEURISTIC_KINDS, run_heuristic
from .metrics import (
    average_normalized_edp,
    cdf_points,
    conserving_analysis,
    merge_reports,
    write_cdf_csv,
    write_outcomes_csv,
    write_report_json,
)
from .policy import PolicyLayout, load_checkpoint
from .simenv import ClusterConfig
from .training import TrainConfig, rollout_groups, run_episode, train
from .workload import (
    MachineProfile,
    WorkloadConfig,
    derive_seed,
    generate_sequence,
    load_workloads,
    save_workloads,
)

# seed-path tags for command-level randomness, disjoint from the tags the
# trainer uses internally
_TAG_GEN = 6
_TAG_EVAL = 7
_TAG_COMPARE = 8
_TAG_ANALYZE = 9

_SUBJECTS = ("policy", "esjf", "hold", "random")
_BASELINES = HEURISTIC_KINDS + ("policy",)


@dataclass(frozen=True)
class RunConfig:
    """Merged configuration for one command invocation."""

    cluster: ClusterConfig
    workload: WorkloadConfig
    train: TrainConfig
    out: Optional[Path]

    def validate(self) -> None:
        self.cluster.validate()
        self.workload.validate()
        self.train.validate()

    def require_out(self) -> Path:
        if self.out is None:
            raise UsageError("an output location is required: pass --out or "
                             "set out in the [output] config section")
        return self.out


# -- config file and flag merging ---------------------------------------------

def _float_or_inf(text: str) -> float:
    if text.strip().lower() in ("inf", "infinity"):
        return math.inf
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected a number or 'inf', got {text!r}") from None


def _to_int(text, what: str) -> int:
    try:
        return int(text)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be an integer, got {text!r}") from None


def _to_float(text, what: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a number, got {text!r}") from None


def _to_bool(text, what: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{what} must be a boolean, got {text!r}")


def _to_range(text, what: str) -> tuple:
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 2:
        raise ConfigError(f"{what} must be 'lo,hi', got {text!r}")
    return (_to_int(parts[0], what), _to_int(parts[1], what))


def _to_machines(text) -> tuple:
    """Parse 'scale:rate, scale:rate, ...' into machine profiles."""
    profiles = []
    for i, chunk in enumerate(str(text).split(",")):
        parts = chunk.strip().split(":")
        if len(parts) != 2:
            raise ConfigError(f"machines entries must be 'scale:rate', got {chunk!r}")
        profiles.append(MachineProfile(machine_id=i,
                                       duration_scale=_to_int(parts[0], "machine scale"),
                                       energy_rate=_to_float(parts[1], "machine rate")))
    return tuple(profiles)


def _read_ini(path) -> dict:
    parser = ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except IniError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    known = ("cluster", "workload", "train", "output")
    sections = {name: {} for name in known}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"{path}: unknown config section [{name}]")
        sections[name] = dict(parser.items(name))
    return sections


_WORKLOAD_KEYS = ("lambda", "beta", "c", "arrival_window", "short_mu_range",
                  "long_mu_range", "demand_range", "seed")
_CLUSTER_KEYS = ("procs_per_machine", "horizon", "queue_slots", "backlog_len",
                 "last_arrival_len", "max_episode_timesteps", "machines")
_TRAIN_KEYS = ("iters", "seqs", "trajs", "lr", "gamma", "seed", "mode",
               "threads", "fixed_pool", "entropy_bonus", "grad_clip",
               "checkpoint_every", "esjf_reference")


def _check_keys(section: str, values: dict, allowed: Sequence[str]) -> None:
    for key in values:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in [{section}] "
                              f"(expected one of {', '.join(allowed)})")


def _workload_from(values: dict) -> WorkloadConfig:
    _check_keys("workload", values, _WORKLOAD_KEYS)
    cfg = WorkloadConfig()
    if "lambda" in values:
        cfg = replace(cfg, arrival_rate=_to_float(values["lambda"], "lambda"))
    if "beta" in values:
        cfg = replace(cfg, short_prob=_to_float(values["beta"], "beta"))
    if "c" in values:
        cfg = replace(cfg, estimator_accuracy=_float_or_inf(str(values["c"])))
    if "arrival_window" in values:
        cfg = replace(cfg, arrival_window=_to_int(values["arrival_window"], "arrival_window"))
    if "short_mu_range" in values:
        cfg = replace(cfg, short_mu_range=_to_range(values["short_mu_range"], "short_mu_range"))
    if "long_mu_range" in values:
        cfg = replace(cfg, long_mu_range=_to_range(values["long_mu_range"], "long_mu_range"))
    if "demand_range" in values:
        cfg = replace(cfg, demand_range=_to_range(values["demand_range"], "demand_range"))
    if "seed" in values:
        cfg = replace(cfg, seed=_to_int(values["seed"], "workload seed"))
    return cfg


def _cluster_from(values: dict) -> ClusterConfig:
    _check_keys("cluster", values, _CLUSTER_KEYS)
    cfg = ClusterConfig()
    for key in ("procs_per_machine", "horizon", "queue_slots", "backlog_len",
                "last_arrival_len", "max_episode_timesteps"):
        if key in values:
            cfg = replace(cfg, **{key: _to_int(values[key], key)})
    if "machines" in values:
        cfg = replace(cfg, machines=_to_machines(values["machines"]))
    return cfg


def _train_from(values: dict) -> TrainConfig:
    _check_keys("train", values, _TRAIN_KEYS)
    cfg = TrainConfig()
    if "iters" in values:
        cfg = replace(cfg, iterations=_to_int(values["iters"], "iters"))
    if "seqs" in values:
        cfg = replace(cfg, sequences_per_iter=_to_int(values["seqs"], "seqs"))
    if "trajs" in values:
        cfg = replace(cfg, trajectories_per_sequence=_to_int(values["trajs"], "trajs"))
    if "lr" in values:
        cfg = replace(cfg, lr=_to_float(values["lr"], "lr"))
    if "gamma" in values:
        cfg = replace(cfg, gamma=_to_float(values["gamma"], "gamma"))
    if "seed" in values:
        cfg = replace(cfg, seed=_to_int(values["seed"], "train seed"))
    if "mode" in values:
        cfg = replace(cfg, eval_mode=str(values["mode"]))
    if "threads" in values:
        cfg = replace(cfg, threads=_to_int(values["threads"], "threads"))
    if "fixed_pool" in values:
        cfg = replace(cfg, fixed_pool=_to_bool(values["fixed_pool"], "fixed_pool"))
    if "entropy_bonus" in values:
        cfg = replace(cfg, entropy_bonus=_to_float(values["entropy_bonus"], "entropy_bonus"))
    if "grad_clip" in values:
        cfg = replace(cfg, grad_clip=_to_float(values["grad_clip"], "grad_clip"))
    if "checkpoint_every" in values:
        cfg = replace(cfg, checkpoint_every=_to_int(values["checkpoint_every"], "checkpoint_every"))
    if "esjf_reference" in values:
        cfg = replace(cfg, esjf_reference=_to_bool(values["esjf_reference"], "esjf_reference"))
    return cfg


def load_run_config(args) -> RunConfig:
    """Defaults, then the config file, then command-line flags."""
    sections = ({name: {} for name in ("cluster", "workload", "train", "output")}
                if args.config is None else _read_ini(args.config))
    flag_map = (("lam", "workload", "lambda"), ("beta", "workload", "beta"),
                ("c", "workload", "c"), ("iters", "train", "iters"),
                ("seqs", "train", "seqs"), ("trajs", "train", "trajs"),
                ("lr", "train", "lr"), ("mode", "train", "mode"),
                ("threads", "train", "threads"), ("out", "output", "out"))
    for attr, section, key in flag_map:
        value = getattr(args, attr, None)
        if value is not None:
            sections[section][key] = value
    if getattr(args, "seed", None) is not None:
        # one flag seeds whichever generator the command roots in
        sections["train"]["seed"] = args.seed
        sections["workload"]["seed"] = args.seed
    out = sections["output"].get("out")
    cfg = RunConfig(cluster=_cluster_from(sections["cluster"]),
                    workload=_workload_from(sections["workload"]),
                    train=_train_from(sections["train"]),
                    out=None if out is None else Path(out))
    cfg.validate()
    return cfg


# -- shared command helpers ----------------------------------------------------

def _load_workload_file(path) -> list:
    try:
        return load_workloads(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid workload file: {exc}") from None


def _load_policy(path, cluster: ClusterConfig):
    params, _ = load_checkpoint(path, expected_layout=PolicyLayout.for_cluster(cluster))
    return params


def _greedy_rollouts(params, sequences, cluster, seeds, mode="greedy"):
    pairs = [(seq, (seed,)) for seq, seed in zip(sequences, seeds)]
    groups = rollout_groups(params, pairs, cluster, mode=mode, collect_obs=False)
    return [group[0] for group in groups]


def _pooled_outcomes(trajs):
    outcomes, sequence_ids = [], []
    for i, traj in enumerate(trajs):
        outs = traj.job_outcomes
        outcomes.extend(outs)
        sequence_ids.extend([i] * len(outs))
    return outcomes, sequence_ids


def _mkdir(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -------------------------------------------------------------------

def cmd_gen(cfg: RunConfig, args) -> int:
    count = args.count
    if count < 0:
        raise UsageError(f"--count must be >= 0, got {count}")
    root = cfg.workload.seed
    print(f"effective seed: {root}")
    sequences = [generate_sequence(replace(cfg.workload, seed=derive_seed(root, _TAG_GEN, i)))
                 for i in range(count)]
    out = cfg.require_out()
    out.parent.mkdir(parents=True, exist_ok=True)
    save_workloads(out, sequences)
    jobs = sum(len(s.jobs) for s in sequences)
    short = sum(j.is_short for s in sequences for j in s.jobs)
    print(f"sequences: {count}")
    if jobs:
        print(f"jobs: {jobs} total, {jobs / count:.1f} per sequence")
        print(f"class mix: {100 * short / jobs:.1f}% short, "
              f"{100 * (jobs - short) / jobs:.1f}% long")
    else:
        print("jobs: 0 total")
    print(f"wrote: {out}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = _mkdir(cfg.require_out())
    print(f"effective seed: {cfg.train.seed}")
    t = cfg.train

    def progress(stats):
        ref = stats.esjf_reference_edp
        ref_text = f" esjf={ref:.1f}" if not math.isnan(ref) else ""
        print(f"iter {stats.iteration + 1}/{t.iterations} "
              f"edp={stats.mean_normalized_edp:.1f}{ref_text} "
              f"return={stats.mean_return:.1f}", flush=True)

    _, curve = train(t, cluster=cfg.cluster, workload_cfg=cfg.workload,
                     out_dir=out, progress=progress)
    if curve:
        last = curve[-1]
        print(f"final mean EDP: {last.mean_normalized_edp:.2f} "
              f"(esjf reference {last.esjf_reference_edp:.2f})")
    print(f"wrote: {out / 'curve.csv'} and checkpoints")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _mkdir(cfg.require_out())
    params = _load_policy(args.checkpoint, cfg.cluster)
    sequences = _load_workload_file(args.workloads)
    root, mode = cfg.train.seed, cfg.train.eval_mode
    print(f"effective seed: {root}")
    if not sequences:
        print(f"warning: {args.workloads} contains no sequences; nothing to evaluate",
              file=sys.stderr)
        write_outcomes_csv(out / "metrics.csv", [], sequence_ids=[])
        write_report_json(out / "report.json", mean_edp=None,
                          extra={"sequences": 0, "jobs": 0, "mode": mode, "seed": root})
        return 0
    seeds = [derive_seed(root, _TAG_EVAL, i) for i in range(len(sequences))]
    trajs = _greedy_rollouts(params, sequences, cfg.cluster, seeds, mode=mode)
    outcomes, sequence_ids = _pooled_outcomes(trajs)
    truncated = sum(t.truncated for t in trajs)
    mean = average_normalized_edp(outcomes) if outcomes else None
    write_outcomes_csv(out / "metrics.csv", outcomes, sequence_ids=sequence_ids)
    write_report_json(out / "report.json", mean_edp=mean,
                      extra={"sequences": len(sequences), "jobs": len(outcomes),
                             "truncated_episodes": truncated, "mode": mode,
                             "seed": root})
    shown = "n/a" if mean is None else f"{mean:.3f}"
    print(f"mean normalized EDP: {shown} over {len(outcomes)} jobs "
          f"({truncated} truncated episodes)")
    print(f"wrote: {out / 'metrics.csv'}, {out / 'report.json'}")
    return 0


def _scheduler_mean(trajs):
    outcomes, _ = _pooled_outcomes(trajs)
    mean = average_normalized_edp(outcomes) if outcomes else math.nan
    return mean, sum(t.truncated for t in trajs)


def cmd_compare(cfg: RunConfig, args) -> int:
    baselines = args.baseline or ["esjf"]
    for kind in baselines:
        if kind not in _BASELINES:
            raise UsageError(f"unknown baseline {kind!r}; expected one of {_BASELINES}")
    out = _mkdir(cfg.require_out())
    params = _load_policy(args.checkpoint, cfg.cluster)
    root = cfg.train.seed
    print(f"effective seed: {root}")
    header = ["lambda", "sequences", "policy_edp", "policy_truncated"]
    for kind in baselines:
        # a second greedy run of the same checkpoint gets its own column name
        prefix = kind if kind != "policy" else "baseline_policy"
        header += [f"{prefix}_edp", f"{prefix}_truncated", f"{prefix}_improvement_pct"]
    rows = []
    for fi, path in enumerate(args.workloads):
        sequences = _load_workload_file(path)
        if not sequences:
            raise UsageError(f"{path}: no sequences to compare on")
        lam = sequences[0].config.arrival_rate
        seeds = [derive_seed(root, _TAG_COMPARE, fi, i) for i in range(len(sequences))]
        policy_trajs = _greedy_rollouts(params, sequences, cfg.cluster, seeds)
        policy_mean, policy_trunc = _scheduler_mean(policy_trajs)
        row = [lam, len(sequences), policy_mean, policy_trunc]
        summary = [f"lambda={lam:g} policy={policy_mean:.2f}"]
        for kind in baselines:
            if kind == "policy":
                base_trajs = _greedy_rollouts(params, sequences, cfg.cluster, seeds)
            else:
                base_trajs = [run_heuristic(kind, seq, cfg.cluster, seed=seed)
                              for seq, seed in zip(sequences, seeds)]
            base_mean, base_trunc = _scheduler_mean(base_trajs)
            improvement = 100.0 * (base_mean - policy_mean) / base_mean
            row += [base_mean, base_trunc, improvement]
            summary.append(f"{kind}={base_mean:.2f} ({improvement:+.1f}%)")
        rows.append(row)
        print("  ".join(summary))
    table = out / "compare.csv"
    with open(table, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")
    print(f"wrote: {table}")
    return 0


def cmd_analyze(cfg: RunConfig, args) -> int:
    subject = args.subject
    if subject == "policy" and args.checkpoint is None:
        raise UsageError("--subject policy requires --checkpoint")
    out = _mkdir(cfg.require_out())
    sequences = _load_workload_file(args.workloads)
    if not sequences:
        raise UsageError(f"{args.workloads}: no sequences to analyze")
    root, mode = cfg.train.seed, cfg.train.eval_mode
    print(f"effective seed: {root}")
    seeds = [derive_seed(root, _TAG_ANALYZE, i) for i in range(len(sequences))]
    if subject == "policy":
        params = _load_policy(args.checkpoint, cfg.cluster)
        trajs = _greedy_rollouts(params, sequences, cfg.cluster, seeds, mode=mode)
    elif subject == "hold":
        hold = lambda env, rng: env.cluster.hold_action
        trajs = [run_episode(hold, seq, cfg.cluster, seed=seed)
                 for seq, seed in zip(sequences, seeds)]
    else:
        trajs = [run_heuristic(subject, seq, cfg.cluster, seed=seed)
                 for seq, seed in zip(sequences, seeds)]
    report = merge_reports([conserving_analysis(t) for t in trajs])
    outcomes, _ = _pooled_outcomes(trajs)
    mean = average_normalized_edp(outcomes) if outcomes else None
    write_report_json(out / "report.json", mean_edp=mean, conserving=report,
                      extra={"subject": subject, "sequences": len(sequences),
                             "jobs": len(outcomes), "seed": root})
    write_cdf_csv(out / "cdf_hold_e.csv",
                  cdf_points(report.hold_e_mu0) if report.hold_e_mu0 else [])
    write_cdf_csv(out / "cdf_hold_w.csv",
                  cdf_points(report.hold_w_mu0) if report.hold_w_mu0 else [])
    print(f"subject: {subject}")
    print(f"not ED-conserving: {100 * report.frac_not_ed_conserving:.1f}% of placements")
    print(f"not work-conserving: {100 * report.frac_not_work_conserving:.1f}% "
          f"of occupied advances")
    print(f"wrote: {out / 'report.json'}, {out / 'cdf_hold_e.csv'}, "
          f"{out / 'cdf_hold_w.csv'}")
    return 0


# -- argument parsing -----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1, not 2."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="INI config file")
    shared.add_argument("--seed", type=int, help="root seed for this command")
    shared.add_argument("--lambda", dest="lam", type=float, metavar="F",
                        help="arrival probability per timestep")
    shared.add_argument("--beta", type=float, metavar="F",
                        help="probability a job is short")
    shared.add_argument("--c", type=str, metavar="F|inf",
                        help="duration estimator accuracy (inf = exact)")
    shared.add_argument("--iters", type=int, metavar="N", help="training iterations")
    shared.add_argument("--seqs", type=int, metavar="N", help="sequences per iteration")
    shared.add_argument("--trajs", type=int, metavar="N",
                        help="trajectories per sequence")
    shared.add_argument("--lr", type=float, metavar="F", help="learning rate")
    shared.add_argument("--mode", choices=("greedy", "sampled"),
                        help="action selection at evaluation time")
    shared.add_argument("--threads", type=int, metavar="N",
                        help="worker processes (1 = reproducible)")
    shared.add_argument("--out", metavar="PATH", help="output file or directory")

    parser = _Parser(prog="easched",
                     description="Energy-aware cluster scheduling lab")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("gen", parents=[shared],
                       help="generate an arrival-sequence workload file")
    p.add_argument("--count", type=int, required=True, metavar="N",
                   help="number of sequences to write")

    sub.add_parser("train", parents=[shared],
                   help="train the scheduling policy; writes curve + checkpoints")

    p = sub.add_parser("eval", parents=[shared],
                       help="evaluate a checkpoint on a workload file")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--workloads", required=True, metavar="PATH")

    p = sub.add_parser("compare", parents=[shared],
                       help="policy vs baselines on paired durations")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--workloads", required=True, nargs="+", metavar="PATH",
                   help="one row per workload file")
    p.add_argument("--baseline", action="append", metavar="KIND",
                   help=f"baseline scheduler, repeatable (default esjf); "
                        f"one of {_BASELINES}")

    p = sub.add_parser("analyze", parents=[shared],
                       help="conserving-behavior report and hold CDFs")
    p.add_argument("--workloads", required=True, metavar="PATH")
    p.add_argument("--subject", choices=_SUBJECTS, default="policy",
                   help="which scheduler to analyze (default policy)")
    p.add_argument("--checkpoint", metavar="PATH",
                   help="required when --subject policy")
    return parser


_COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
             "compare": cmd_compare, "analyze": cmd_analyze}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.c is not None:
            args.c = _float_or_inf(args.c)
        cfg = load_run_config(args)
        return _COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
