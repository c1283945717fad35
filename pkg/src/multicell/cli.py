"""Command-line front end.

Subcommands:

* ``analyze``   -- closed-form per-stage and per-cell report for a config
* ``simulate``  -- replicated discrete-event simulation, snapshots + summary
* ``compare``   -- empirical-vs-analytical metrics over random cell subsets
* ``fixture``   -- deterministic synthetic polling trace with ground truth
* ``trace``     -- full polling-log pipeline: sessions, parameters, validity

Every run writes a manifest (subcommand, effective arguments, seed, input
digests, tool version) into the output directory before any result file.
Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from collections import Counter
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from . import analytic, model, sim, stats, trace

__version__ = "0.1.0"

_WINDOW = None  # derived from PreprocessConfig where needed


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(outdir: Path, subcommand: str, args: dict, inputs: list) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "multicell",
        "version": __version__,
        "subcommand": subcommand,
        "arguments": {k: v for k, v in sorted(args.items()) if k not in ("func",)},
        "input_digests": {str(p): _digest(p) for p in inputs},
    }
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
        fh.write("\n")


def _load_valid_spec(path) -> model.NetworkSpec:
    spec = model.load_spec(path)
    problems = model.validate(spec)
    if problems:
        raise ValidationError("invalid network config:\n  " + "\n  ".join(problems))
    return spec


class ValidationError(Exception):
    pass


def _discrete_spec(spec: model.NetworkSpec, samples: int, bin_width: float,
                   seed: int) -> model.NetworkSpec:
    """Replace generative laws with Monte-Carlo discretizations."""
    routes = []
    for idx, rs in enumerate(spec.routes):
        if isinstance(rs.law, model.GenerativeSessionLaw):
            law = model.discretize(rs.law, samples, bin_width, seed + idx)
            rs = model.RouteSpec(rs.route, rs.arrival_rate, law)
        routes.append(rs)
    return model.NetworkSpec(spec.cell_count, tuple(routes), spec.cell_meta)


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze(args) -> int:
    spec = _load_valid_spec(args.config)
    out = Path(args.out)
    write_manifest(out, "analyze", vars(args), [args.config])
    spec = _discrete_spec(spec, args.discretize_samples, args.bin_width, args.seed)

    warnings = []
    with open(out / "stage_means.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["route", "stage", "cell", "invariant_measure", "hold_mean",
                    "occupancy_mean"])
        for l, rs in enumerate(spec.routes, start=1):
            sm = analytic.stage_means(rs)
            reachable = set(sm.stages)
            for j in range(1, rs.route.n_stages + 1):
                if j not in reachable:
                    warnings.append(f"route {l} stage {j} is unreachable "
                                    f"(zero survival probability)")
            for j, wp, tb, wj in zip(sm.stages, sm.w_prime, sm.t_bar, sm.w):
                w.writerow([l, j, rs.route.cells[j - 1], repr(wp), repr(tb), repr(wj)])

    cm = analytic.cell_means(spec)
    analytic.write_cell_means_csv(cm, out / "cell_means.csv")

    with open(out / "cell_pmf.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "count", "probability"])
        for n, m in enumerate(cm.poisson_mean, start=1):
            form = analytic.ProductForm((m,))
            for y in range(analytic.poisson_truncation(m) + 1):
                w.writerow([n, y, repr(form.pmf((y,)))])

    for warning in warnings:
        print(f"warning: {warning}")
    print(f"analyze: wrote stage_means.csv, cell_means.csv, cell_pmf.csv to {out}")
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec = _load_valid_spec(args.config)
    out = Path(args.out)
    write_manifest(out, "simulate", vars(args), [args.config])
    cfg = sim.SimConfig(horizon=args.horizon, warmup=args.warmup,
                        snapshot_interval=args.interval, seed=args.seed,
                        replications=args.replications)
    pooled = []
    for r in range(cfg.replications):
        snaps = sim.run(spec, cfg, replication=r)
        sim.write_snapshots_csv(snaps, out / f"snapshots_rep{r}.csv")
        pooled.extend(snaps)
    sim.write_snapshots_csv(pooled, out / "snapshots.csv")

    counts = np.array([s.cell_counts for s in pooled], dtype=float)
    emp_mean = counts.mean(axis=0)
    all_discrete = all(isinstance(rs.law, model.DiscreteSessionLaw) for rs in spec.routes)
    analytic_means = analytic.cell_means(spec).poisson_mean if all_discrete else None
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "empirical_mean", "analytic_mean", "relative_error"])
        for n in range(spec.cell_count):
            if analytic_means is not None and analytic_means[n] > 0:
                rel = abs(emp_mean[n] - analytic_means[n]) / analytic_means[n]
                w.writerow([n + 1, repr(float(emp_mean[n])),
                            repr(analytic_means[n]), repr(float(rel))])
            else:
                w.writerow([n + 1, repr(float(emp_mean[n])), "", ""])
    print(f"simulate: {len(pooled)} snapshots over {cfg.replications} "
          f"replication(s) written to {out}")
    return 0


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def read_snapshots_csv(path) -> list[tuple[int, ...]]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for row in reader:
            out.append(tuple(int(v) for v in row[1:]))
    return out


def cmd_compare(args) -> int:
    spec = _load_valid_spec(args.config)
    out = Path(args.out)
    write_manifest(out, "compare", vars(args), [args.config, args.snapshots])
    spec = _discrete_spec(spec, args.discretize_samples, args.bin_width, args.seed)
    vectors = read_snapshots_csv(args.snapshots)
    if vectors and len(vectors[0]) != spec.cell_count:
        raise ValidationError(
            f"snapshot dimension {len(vectors[0])} != cell count {spec.cell_count}")
    emp = stats.empirical_joint(vectors)
    form = analytic.cell_product_form(spec)
    coords = spec.coordinates() if args.distance_max is not None else None
    if args.distance_max is not None and coords is None:
        raise ValidationError("--distance-max requires cell coordinates in the config")

    rows = []
    if args.subset_size is not None:
        sizes = [args.subset_size]
    else:
        sizes = list(range(1, min(5, spec.cell_count) + 1))
    rng = np.random.default_rng(args.seed)
    for n in sizes:
        if n == 1:
            # entropy gap needs two or more cells
            study = stats.random_subset_study(emp, form, 1, args.repeats, rng,
                                              coordinates=coords,
                                              max_distance=args.distance_max)
            rows.append((1, study.h_kl_mean, study.h_kl_std, "", "",
                         study.h_real_mean, study.h_real_std))
        else:
            study = stats.random_subset_study(emp, form, n, args.repeats, rng,
                                              coordinates=coords,
                                              max_distance=args.distance_max)
            rows.append((n, study.h_kl_mean, study.h_kl_std,
                         study.h_gap_mean, study.h_gap_std,
                         study.h_real_mean, study.h_real_std))
    with open(out / "subset_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "h_kl_mean", "h_kl_std", "h_gap_mean", "h_gap_std",
                    "h_real_mean", "h_real_std"])
        for row in rows:
            w.writerow([row[0]] + [repr(v) if v != "" else "" for v in row[1:]])
    print(f"compare: subset metrics for n={sizes} written to {out}")
    return 0


# ---------------------------------------------------------------------------
# fixture
# ---------------------------------------------------------------------------

def ap_name(cell: int) -> str:
    return f"AP{cell:03d}"


def _working_day_starts(n_days: int, cfg: trace.PreprocessConfig,
                        first_day: str = "2004-01-05") -> list[float]:
    """UTC timestamps of the working-window start for the first n weekdays."""
    day = datetime.fromisoformat(first_day).replace(tzinfo=timezone.utc)
    out = []
    while len(out) < n_days:
        if day.weekday() in cfg.weekdays:
            out.append(day.timestamp() + cfg.work_start)
        day += timedelta(days=1)
    return out


def _stage_polls(user: str, ap: str, entry: float, exit_: float,
                 cadence: float, packets: int) -> list[trace.PollRecord]:
    out = []
    i = math.ceil((entry - 1e-9) / cadence)
    while i * cadence < exit_ - 1e-9:
        out.append(trace.PollRecord(i * cadence, ap, user, packets))
        i += 1
    return out


def generate_fixture(spec: model.NetworkSpec, seed: int, days: int,
                     cadence: float = 300.0,
                     closed_users: int = 0,
                     bursty_cell: int | None = None,
                     burst_size: int = 10,
                     bursts_per_day: float = 6.0,
                     pcfg: trace.PreprocessConfig | None = None
                     ) -> tuple[list[trace.PollRecord], dict]:
    """Synthetic polling trace with known ground truth.

    Per working day, one independent simulation replication fills the
    working window; sessions that would cross the window boundary are
    dropped (and not counted in the ground truth). Optionally adds
    always-present closed users and a bursty cell receiving batched
    one-stage arrivals, for exercising the classifier and the Poisson
    tests.
    """
    pcfg = pcfg or trace.PreprocessConfig(poll_cadence=cadence)
    window = pcfg.work_end - pcfg.work_start
    day_starts = _working_day_starts(days, pcfg)
    rng = np.random.default_rng(seed)

    records: list[trace.PollRecord] = []
    table: Counter = Counter()
    per_ap_entries: Counter = Counter()
    per_ap_new: Counter = Counter()
    per_ap_hold: Counter = Counter()
    users: set[str] = set()
    burst_ap = ap_name(bursty_cell) if bursty_cell is not None else None
    sessions_total = 0

    run_cfg = sim.SimConfig(horizon=window, warmup=0.0, snapshot_interval=window,
                            seed=seed)
    for d, day0 in enumerate(day_starts):
        log = sim.emit_event_log(spec, run_cfg, replication=d)
        for ev in log:
            if ev.arrival_time + sum(ev.holding_times) >= window:
                continue   # would cross the window boundary; keep truth exact
            user = f"u{d:03d}_{ev.session_id:06d}"
            users.add(user)
            sessions_total += 1
            table[ev.stage_count] += 1
            t = day0 + ev.arrival_time
            cells = spec.routes[ev.route - 1].route.cells
            for j, h in enumerate(ev.holding_times, start=1):
                ap = ap_name(cells[j - 1])
                records.extend(_stage_polls(user, ap, t, t + h, cadence, 10))
                per_ap_entries[ap] += 1
                per_ap_hold[ap] += h
                if j == 1:
                    per_ap_new[ap] += 1
                t += h

        for i in range(closed_users):
            user = f"closed{i:02d}"
            users.add(user)
            n_epochs = int(window // cadence)
            for e in range(n_epochs):
                records.append(trace.PollRecord(day0 + e * cadence,
                                                ap_name(1), user, 10))

        if burst_ap is not None:
            n_bursts = rng.poisson(bursts_per_day)
            for b in range(n_bursts):
                t0 = day0 + float(rng.uniform(0, window - 3 * cadence))
                for u in range(burst_size):
                    user = f"burst{d:03d}_{b:02d}_{u:02d}"
                    users.add(user)
                    sessions_total += 1
                    table[1] += 1
                    per_ap_entries[burst_ap] += 1
                    per_ap_new[burst_ap] += 1
                    per_ap_hold[burst_ap] += 2 * cadence
                    records.extend(_stage_polls(user, burst_ap, t0,
                                                t0 + 2 * cadence, cadence, 10))

    for i in range(closed_users):
        users.add(f"closed{i:02d}")
    records.sort(key=lambda r: (r.timestamp, r.ap, r.user))

    observed = days * window
    truth = {
        "seed": seed,
        "days": days,
        "cadence": cadence,
        "stage_table": {str(k): v for k, v in sorted(table.items())},
        "sessions_total": sessions_total,
        "users_total": len(users),
        "closed_users": sorted(f"closed{i:02d}" for i in range(closed_users)),
        "closed_fraction": closed_users / len(users) if users else 0.0,
        "bursty_aps": [burst_ap] if burst_ap else [],
        "sessions_starting_at_bursty": int(per_ap_new[burst_ap]) if burst_ap else 0,
        "per_ap": {
            ap: {
                "entries": int(per_ap_entries[ap]),
                "new_arrivals": int(per_ap_new[ap]),
                "hold_mean": per_ap_hold[ap] / per_ap_entries[ap],
                "observed_time": observed,
                "arrival_rate": per_ap_entries[ap] / observed,
            }
            for ap in sorted(per_ap_entries)
        },
    }
    return records, truth


def write_polls_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "ap", "user", "packets"])
        for r in records:
            w.writerow([repr(r.timestamp), r.ap, r.user, r.packets])


def cmd_fixture(args) -> int:
    spec = _load_valid_spec(args.config)
    out = Path(args.out)
    write_manifest(out, "fixture", vars(args), [args.config])
    records, truth = generate_fixture(
        spec, seed=args.seed, days=args.days, cadence=args.cadence,
        closed_users=args.closed_users, bursty_cell=args.bursty_cell,
        burst_size=args.burst_size, bursts_per_day=args.bursts_per_day)
    write_polls_csv(records, out / "polls.csv")
    with open(out / "ground_truth.json", "w") as fh:
        json.dump(truth, fh, indent=2)
        fh.write("\n")
    print(f"fixture: {len(records)} poll records over {args.days} day(s) "
          f"written to {out}")
    return 0


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------

def cmd_trace(args) -> int:
    out = Path(args.out)
    write_manifest(out, "trace", vars(args), [args.polls])
    records, rejects = trace.parse_polls(args.polls)
    if not records:
        raise ValidationError(f"no usable poll records in {args.polls}")
    pcfg = trace.PreprocessConfig(
        departure_threshold=args.departure_threshold,
        pingpong_return=args.pingpong_return,
        closed_user_hours=args.closed_user_hours,
        poll_cadence=args.cadence,
    )
    result = trace.run_pipeline(records, pcfg, rejects=rejects,
                                interval=args.test_interval,
                                eta_threshold=args.threshold_eta,
                                theta_threshold=args.threshold_theta)

    sessions, excluded = trace.exclusion_modes(
        result.sessions, result.invalid_aps, args.exclude_mode,
        exclude_one_stage=args.exclude_one_stage)

    trace.write_sessions_csv(sessions, out / "sessions.csv")
    trace.write_estimates_csv(result.estimates, out / "ap_params.csv")
    with open(out / "stage_table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stages", "observations"])
        for label, count in trace.stage_table_rows(result.stage_table):
            w.writerow([label, count])
    with open(out / "ap_validity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ap", "eta", "eta_pass", "theta", "theta_pass", "valid"])
        for ap, v in sorted(result.validity.items()):
            w.writerow([
                ap,
                "" if v.independence.statistic is None else repr(v.independence.statistic),
                v.independence.passed,
                "" if v.poisson.statistic is None else repr(v.poisson.statistic),
                v.poisson.passed, v.valid])

    # empirical occupancy at poll cadence vs fitted product form
    aps = sorted(set(result.estimates) - excluded)
    epochs = sorted({r.timestamp for r in records})
    occupancy = trace.occupancy_snapshots(sessions, aps, epochs)
    form = analytic.ProductForm(
        tuple(result.estimates[ap].poisson_mean for ap in aps), tuple(aps))
    with open(out / "marginal_comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ap", "h_kl", "h_real", "kl_ratio"])
        for i, ap in enumerate(aps, start=1):
            emp = stats.empirical_joint(occupancy, [i])
            cmp = stats.compare_joint(emp, analytic.ProductForm((form.means[i - 1],)))
            w.writerow([ap, repr(cmp.h_kl), repr(cmp.h_real), repr(cmp.kl_ratio)])

    report = {
        "records_in": result.records_in,
        "rejects": len(result.rejects),
        "cadence": result.cadence,
        "removed_days": result.removed_days,
        "open_users": len(result.open_users),
        "closed_users": len(result.closed_users),
        "closed_fraction": result.closed_fraction,
        "sessions": len(result.sessions),
        "sessions_after_exclusion": len(sessions),
        "stage_table": {str(k): v for k, v in sorted(result.stage_table.items())},
        "valid_aps": sorted(result.valid_aps),
        "invalid_aps": sorted(result.invalid_aps),
        "exclusion_mode": args.exclude_mode,
        "excluded_aps": sorted(excluded),
        "preprocessing_notes": list(result.notes),
    }
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    print(f"trace: {len(result.sessions)} sessions, "
          f"{len(result.valid_aps)}/{len(result.validity)} valid APs; "
          f"outputs in {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multicell",
                                description="Multicell occupancy model toolkit")
    sub = p.add_subparsers(dest="subcommand", required=True)

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)

    def discretization(sp):
        sp.add_argument("--discretize-samples", type=int, default=200_000,
                        help="Monte-Carlo samples when discretizing generative laws")
        sp.add_argument("--bin-width", type=float, default=1.0,
                        help="holding-time bin width in seconds for discretization")

    sp = sub.add_parser("analyze", help="closed-form per-stage/per-cell report")
    sp.add_argument("--config", required=True)
    common(sp)
    discretization(sp)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("simulate", help="discrete-event simulation")
    sp.add_argument("--config", required=True)
    common(sp)
    sp.add_argument("--horizon", type=float, required=True, help="seconds")
    sp.add_argument("--warmup", type=float, default=None)
    sp.add_argument("--interval", type=float, default=None,
                    help="snapshot interval in seconds")
    sp.add_argument("--replications", type=int, default=1)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("compare", help="empirical vs analytical joint metrics")
    sp.add_argument("--config", required=True)
    sp.add_argument("--snapshots", required=True, help="snapshot CSV from simulate")
    common(sp)
    discretization(sp)
    sp.add_argument("--subset-size", type=int, default=None)
    sp.add_argument("--repeats", type=int, default=100)
    sp.add_argument("--distance-max", type=float, default=None,
                    help="pairwise cell distance cap in meters")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("fixture", help="synthetic polling trace with ground truth")
    sp.add_argument("--config", required=True)
    common(sp)
    sp.add_argument("--days", type=int, default=5)
    sp.add_argument("--cadence", type=float, default=300.0)
    sp.add_argument("--closed-users", type=int, default=0)
    sp.add_argument("--bursty-cell", type=int, default=None)
    sp.add_argument("--burst-size", type=int, default=10)
    sp.add_argument("--bursts-per-day", type=float, default=6.0)
    sp.set_defaults(func=cmd_fixture)

    sp = sub.add_parser("trace", help="polling-log pipeline")
    sp.add_argument("--polls", required=True, help="poll CSV (optionally .gz)")
    common(sp)
    sp.add_argument("--cadence", type=float, default=None,
                    help="poll cadence in seconds (default: inferred)")
    sp.add_argument("--departure-threshold", type=float, default=600.0)
    sp.add_argument("--pingpong-return", type=float, default=300.0)
    sp.add_argument("--closed-user-hours", type=float, default=7.5)
    sp.add_argument("--test-interval", type=float, default=3600.0,
                    help="arrival-count bucket length for the Poisson tests")
    sp.add_argument("--threshold-eta", type=float, default=0.15)
    sp.add_argument("--threshold-theta", type=float, default=0.15)
    sp.add_argument("--exclude-mode", type=int, default=3, choices=(1, 2, 3),
                    help="1: drop sessions starting at invalid APs; "
                         "2: drop invalid APs from occupancy; 3: keep all")
    sp.add_argument("--exclude-one-stage", action="store_true")
    sp.set_defaults(func=cmd_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:   # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
