"""Discrete-event simulator for the multi-route network.

Per route, new sessions arrive as a Poisson process. Each arrival samples a
session from the route's law, which fixes the number of stages and every
per-stage holding time up front; the event queue then carries the resulting
stage entry/exit count changes plus the snapshot clock. The queue is ordered
by (time, insertion sequence) so simultaneous events (common with
deterministic laws) resolve deterministically.

RNG: numpy's counter-based Philox generator. Replication r of a run with
seed s uses ``Philox(SeedSequence((s, r)))``; streams for different r are
independent and any (s, r) pair reproduces bit-identically across runs.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (DiscreteSessionLaw, GenerativeSessionLaw, NetworkSpec,
                    SessionLaw, holding_vector)


@dataclass(frozen=True)
class SimConfig:
    horizon: float
    warmup: float | None = None
    snapshot_interval: float | None = None
    seed: int = 0
    replications: int = 1
    track_stages: bool = False
    max_events: int = 50_000_000

    def __post_init__(self):
        if self.warmup is not None and self.warmup >= self.horizon:
            raise ValueError(f"warmup {self.warmup} must be < horizon {self.horizon}")
        if self.snapshot_interval is not None and not self.snapshot_interval > 0:
            raise ValueError("snapshot_interval must be > 0")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")


@dataclass(frozen=True)
class OccupancySnapshot:
    time: float
    cell_counts: tuple[int, ...]
    stage_counts: dict[tuple[int, int], int] | None = None


@dataclass(frozen=True)
class SessionEvent:
    """One completed session in the event log."""

    session_id: int
    route: int                      # 1-based route index
    arrival_time: float
    holding_times: tuple[float, ...]

    @property
    def stage_count(self) -> int:
        return len(self.holding_times)


@dataclass
class ReplicationSummary:
    replication: int
    snapshots: int
    cell_mean: tuple[float, ...]


def rng_for_replication(seed: int, replication: int) -> np.random.Generator:
    """The documented stream-derivation rule: Philox(SeedSequence((seed, r)))."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, replication))))


def sample_session(law: SessionLaw, rng: np.random.Generator) -> tuple[int, tuple[float, ...]]:
    """Draw one session: (stage count, per-stage holding times)."""
    if isinstance(law, DiscreteSessionLaw):
        k = int(rng.choice(law.n_stages, p=np.asarray(law.stage_probs) /
                           sum(law.stage_probs))) + 1
        per_k = law.realizations[k - 1]
        weights = np.array([w for w, _ in per_k])
        i = int(rng.choice(len(per_k), p=weights / weights.sum()))
        return k, per_k[i][1]
    if isinstance(law, GenerativeSessionLaw):
        T, taus = law.sample(rng)
        holds = holding_vector(T, taus)
        return len(holds), tuple(holds)
    raise TypeError(f"unsupported session law {type(law).__name__}")


def mean_session_duration(law: SessionLaw) -> float:
    """Expected total in-network time of one session (approximate for
    generative laws, where the duration mean is used as an upper proxy)."""
    if isinstance(law, DiscreteSessionLaw):
        return sum(
            p * w * sum(vec)
            for p, per_k in zip(law.stage_probs, law.realizations)
            for w, vec in per_k
        )
    mean = law.duration.mean()
    if law.speed is not None and law.speed_scales_duration:
        mean *= law.speed.mean()
    return mean


def suggested_timing(spec: NetworkSpec) -> tuple[float, float]:
    """(warmup, snapshot_interval) defaults: 10x the longest route mean
    duration and 5x the longest per-stage mean holding time."""
    max_dur = 0.0
    max_hold = 0.0
    for rs in spec.routes:
        dur = mean_session_duration(rs.law)
        max_dur = max(max_dur, dur)
        if isinstance(rs.law, DiscreteSessionLaw):
            from .analytic import mean_holding_times
            holds = [t for t in mean_holding_times(rs.law) if t is not None]
        else:
            holds = [min(dur, d.mean()) for d in rs.law.dwells]
        if holds:
            max_hold = max(max_hold, max(holds))
    return 10.0 * max_dur, 5.0 * max_hold


def _resolved(spec: NetworkSpec, cfg: SimConfig) -> SimConfig:
    if cfg.warmup is None or cfg.snapshot_interval is None:
        warmup, interval = suggested_timing(spec)
        cfg = replace(
            cfg,
            warmup=cfg.warmup if cfg.warmup is not None else min(warmup, 0.5 * cfg.horizon),
            snapshot_interval=cfg.snapshot_interval if cfg.snapshot_interval is not None else interval,
        )
    return cfg


def run(spec: NetworkSpec, cfg: SimConfig, *, replication: int = 0,
        collect_log: bool = False) -> list[OccupancySnapshot] | tuple[list[OccupancySnapshot], list[SessionEvent]]:
    """Simulate one replication and return its occupancy snapshots.

    Snapshots are taken at warmup + i * snapshot_interval for every i with
    that time <= horizon. Arrivals during warmup are simulated normally so
    the first snapshot already sees in-flight sessions.
    """
    cfg = _resolved(spec, cfg)
    rng = rng_for_replication(cfg.seed, replication)
    C = spec.cell_count

    seq = itertools.count()
    heap: list[tuple[float, int, int, int, tuple[int, int]]] = []
    # event payload: (time, seq, kind, delta, (route, stage))
    # kind 0 = count change, 1 = route arrival, 2 = snapshot
    _NONE = (0, 0)

    for l, rs in enumerate(spec.routes, start=1):
        t0 = rng.exponential(1.0 / rs.arrival_rate)
        heapq.heappush(heap, (t0, next(seq), 1, 0, (l, 0)))

    snap_t = cfg.warmup
    while snap_t <= cfg.horizon:
        heapq.heappush(heap, (snap_t, next(seq), 2, 0, _NONE))
        snap_t += cfg.snapshot_interval

    cell_counts = [0] * C
    stage_counts: dict[tuple[int, int], int] = {}
    snapshots: list[OccupancySnapshot] = []
    log: list[SessionEvent] = []
    session_ids = itertools.count()
    processed = 0

    while heap:
        time, _, kind, delta, key = heapq.heappop(heap)
        processed += 1
        if processed > cfg.max_events:
            raise RuntimeError(f"event count exceeded safety cap max_events={cfg.max_events}")
        if kind == 2:
            snapshots.append(OccupancySnapshot(
                time, tuple(cell_counts),
                dict(stage_counts) if cfg.track_stages else None))
        elif kind == 1:
            l = key[0]
            rs = spec.routes[l - 1]
            nxt = time + rng.exponential(1.0 / rs.arrival_rate)
            if nxt <= cfg.horizon:
                heapq.heappush(heap, (nxt, next(seq), 1, 0, (l, 0)))
            k, holds = sample_session(rs.law, rng)
            if collect_log:
                log.append(SessionEvent(next(session_ids), l, time, holds))
            t = time
            for j, h in enumerate(holds, start=1):
                heapq.heappush(heap, (t, next(seq), 0, +1, (l, j)))
                t += h
                heapq.heappush(heap, (t, next(seq), 0, -1, (l, j)))
        else:
            l, j = key
            n = spec.routes[l - 1].route.cells[j - 1]
            cell_counts[n - 1] += delta
            if cfg.track_stages:
                stage_counts[key] = stage_counts.get(key, 0) + delta
                if stage_counts[key] == 0:
                    del stage_counts[key]
    if collect_log:
        return snapshots, log
    return snapshots


def run_replications(spec: NetworkSpec, cfg: SimConfig
                     ) -> tuple[list[OccupancySnapshot], list[ReplicationSummary]]:
    """Run cfg.replications independent streams and pool the snapshots.

    Pooled output lists replication 0's snapshots first, then 1's, and so
    on, so the order is deterministic.
    """
    pooled: list[OccupancySnapshot] = []
    summaries: list[ReplicationSummary] = []
    for r in range(cfg.replications):
        snaps = run(spec, cfg, replication=r)
        pooled.extend(snaps)
        counts = np.array([s.cell_counts for s in snaps], dtype=float)
        summaries.append(ReplicationSummary(
            r, len(snaps), tuple(counts.mean(axis=0)) if len(snaps) else ()))
    return pooled, summaries


def emit_event_log(spec: NetworkSpec, cfg: SimConfig, *, replication: int = 0
                   ) -> list[SessionEvent]:
    """Full session-level record of one replication (no snapshots needed)."""
    _, log = run(spec, cfg, replication=replication, collect_log=True)
    return log


def write_snapshots_csv(snapshots, path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        C = len(snapshots[0].cell_counts) if snapshots else 0
        w.writerow(["time"] + [f"y{n}" for n in range(1, C + 1)])
        for s in snapshots:
            w.writerow([repr(s.time)] + list(s.cell_counts))


def write_event_log_csv(log, path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["session_id", "route", "arrival_time", "stages", "holding_times"])
        for ev in log:
            w.writerow([ev.session_id, ev.route, repr(ev.arrival_time),
                        ev.stage_count, " ".join(repr(h) for h in ev.holding_times)])
