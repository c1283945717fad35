"""Closed-form engine for the stationary user distribution.

Per route, the invariant measure of stage j is the arrival rate times the
probability the session survives to stage j; multiplying by the conditional
mean holding time gives the expected stage occupancy w_lj. Summing w_lj over
all (route, stage) pairs mapped to one cell gives that cell's Poisson mean,
and the joint stationary distribution over cells is a product of independent
Poissons with those means.

All probability mass computation happens in log space (log-gamma for
factorials) so counts beyond ~170 do not overflow.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .model import DiscreteSessionLaw, NetworkSpec, RouteSpec

_IDENTITY_TOL = 1e-9


def survival(stage_probs, j: int) -> float:
    """Probability the session lasts at least j stages: 1 - sum(p_1..p_{j-1})."""
    if not 1 <= j <= len(stage_probs):
        raise ValueError(f"stage index {j} outside 1..{len(stage_probs)}")
    return 1.0 - math.fsum(stage_probs[: j - 1])


def transition_prob(stage_probs, k: int) -> tuple[float, float]:
    """(continue, terminate) probabilities for a session in stage k."""
    if not 1 <= k <= len(stage_probs):
        raise ValueError(f"stage index {k} outside 1..{len(stage_probs)}")
    tail = math.fsum(stage_probs[k - 1:])
    if tail <= 0:
        raise ValueError(f"unreachable stage {k}: zero survival probability")
    cont = math.fsum(stage_probs[k:]) / tail
    term = stage_probs[k - 1] / tail
    # renormalize away the last float ulp so the pair sums to 1 exactly
    total = cont + term
    return cont / total, term / total


def mean_holding_times(law: DiscreteSessionLaw) -> list[float | None]:
    """Conditional mean holding time per stage.

    Entry j-1 is the mean holding time at stage j given the session reaches
    stage j, or None for unreachable stages (zero survival probability).
    """
    n = law.n_stages
    out: list[float | None] = []
    for j in range(1, n + 1):
        surv = survival(law.stage_probs, j)
        if surv <= 0:
            out.append(None)
            continue
        num = math.fsum(
            law.stage_probs[k - 1] * w * vec[j - 1]
            for k in range(j, n + 1)
            for w, vec in law.realizations[k - 1]
        )
        out.append(num / surv)
    return out


@dataclass(frozen=True)
class StageMeans:
    """Per-stage quantities for one route; unreachable stages are excluded.

    ``stages`` holds the 1-based stage indices with positive survival
    probability; the remaining arrays are aligned with it.
    """

    stages: tuple[int, ...]
    w_prime: tuple[float, ...]   # invariant measure, sessions/second
    t_bar: tuple[float, ...]     # conditional mean holding time, seconds
    w: tuple[float, ...]         # expected occupancy (dimensionless)

    @property
    def rates(self) -> tuple[float, ...]:
        """Equivalent memoryless service rates 1/t_bar."""
        return tuple(1.0 / t for t in self.t_bar)


def stage_means(route_spec: RouteSpec) -> StageMeans:
    """Invariant measures and expected occupancies for one route.

    Also cross-checks the decoupled-network identity: the occupancies of the
    per-(stage count, realization) branches must re-sum to w_j.
    """
    law = route_spec.law
    if not isinstance(law, DiscreteSessionLaw):
        raise TypeError("stage_means requires a DiscreteSessionLaw")
    lam0 = route_spec.arrival_rate
    t_bars = mean_holding_times(law)
    branch = decoupled_means(route_spec)

    stages, w_prime, t_bar, w = [], [], [], []
    for j in range(1, law.n_stages + 1):
        tb = t_bars[j - 1]
        if tb is None:
            continue
        wp = lam0 * survival(law.stage_probs, j)
        wj = wp * tb
        branch_sum = math.fsum(v for (k, i, jj), v in branch.items() if jj == j)
        if abs(branch_sum - wj) > _IDENTITY_TOL * max(1.0, abs(wj)):
            raise AssertionError(
                f"decoupled-branch occupancies {branch_sum!r} disagree with "
                f"stage occupancy {wj!r} at stage {j}")
        stages.append(j)
        w_prime.append(wp)
        t_bar.append(tb)
        w.append(wj)
    return StageMeans(tuple(stages), tuple(w_prime), tuple(t_bar), tuple(w))


def decoupled_means(route_spec: RouteSpec) -> dict[tuple[int, int, int], float]:
    """Expected occupancy of each decoupled branch queue.

    Keys are (stage count k, realization index i, stage j) with j <= k; the
    value is arrival_rate * P_ki * t_kij.
    """
    law = route_spec.law
    if not isinstance(law, DiscreteSessionLaw):
        raise TypeError("decoupled_means requires a DiscreteSessionLaw")
    lam0 = route_spec.arrival_rate
    out = {}
    for k in range(1, law.n_stages + 1):
        pk = law.stage_probs[k - 1]
        for i, (q, vec) in enumerate(law.realizations[k - 1], start=1):
            for j in range(1, k + 1):
                out[(k, i, j)] = lam0 * pk * q * vec[j - 1]
    return out


@dataclass(frozen=True)
class CellMeans:
    """Per-cell aggregates: arrival rate, mean holding time, Poisson mean.

    ``hold_mean[n-1]`` is None for cells no route visits (rate and mean are
    then zero).
    """

    arrival_rate: tuple[float, ...]
    hold_mean: tuple[float | None, ...]
    poisson_mean: tuple[float, ...]


def cell_means(spec: NetworkSpec) -> CellMeans:
    """Aggregate per-route stage occupancies into per-cell Poisson means."""
    C = spec.cell_count
    lam = [0.0] * C
    mass = [0.0] * C    # arrival_rate * survival * t_bar contributions
    for rs in spec.routes:
        sm = stage_means(rs)
        for j, wp, wj in zip(sm.stages, sm.w_prime, sm.w):
            n = rs.route.cells[j - 1]
            lam[n - 1] += wp
            mass[n - 1] += wj
    hold = tuple(m / r if r > 0 else None for r, m in zip(lam, mass))
    means = tuple(m if r > 0 else 0.0 for r, m in zip(lam, mass))
    return CellMeans(tuple(lam), hold, means)


@dataclass(frozen=True)
class ProductForm:
    """Product of independent Poissons; one mean per coordinate."""

    means: tuple[float, ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if any(m < 0 for m in self.means):
            raise ValueError("Poisson means must be non-negative")
        if self.labels and len(self.labels) != len(self.means):
            raise ValueError("labels length must match means")

    @property
    def dimension(self) -> int:
        return len(self.means)

    def logpmf(self, counts) -> float:
        counts = list(counts)
        if len(counts) != len(self.means):
            raise ValueError(f"counts length {len(counts)} != dimension {len(self.means)}")
        total = 0.0
        for m, y in zip(self.means, counts):
            if y < 0 or y != int(y):
                raise ValueError(f"invalid count {y!r}")
            y = int(y)
            if m == 0.0:
                if y != 0:
                    return -math.inf
                continue
            total += -m + y * math.log(m) - math.lgamma(y + 1)
        return total

    def pmf(self, counts) -> float:
        return math.exp(self.logpmf(counts))


def product_form_pmf(form: ProductForm, counts) -> float:
    """Joint probability of one occupancy vector under the product form."""
    return form.pmf(counts)


def compose_poisson(means, partition) -> ProductForm:
    """Group coordinates of a product form; sums of disjoint groups stay
    independent Poisson with summed means.

    ``partition`` is a list of disjoint sets of 1-based coordinate indices.
    """
    means = list(means)
    seen: set[int] = set()
    out = []
    for group in partition:
        group = set(group)
        if group & seen:
            raise ValueError(f"overlapping partition sets at indices {sorted(group & seen)}")
        for idx in group:
            if not 1 <= idx <= len(means):
                raise ValueError(f"index {idx} outside 1..{len(means)}")
        seen |= group
        out.append(math.fsum(means[i - 1] for i in sorted(group)))
    return ProductForm(tuple(out))


def stage_product_form(spec: NetworkSpec) -> ProductForm:
    """Joint stationary distribution over all (route, stage) coordinates."""
    means, labels = [], []
    for l, rs in enumerate(spec.routes, start=1):
        sm = stage_means(rs)
        for j, wj in zip(sm.stages, sm.w):
            means.append(wj)
            labels.append(f"route{l}.stage{j}")
    return ProductForm(tuple(means), tuple(labels))


def cell_product_form(spec: NetworkSpec) -> ProductForm:
    """Joint stationary distribution over cells (the model's main output)."""
    cm = cell_means(spec)
    labels = tuple(f"cell{n}" for n in range(1, spec.cell_count + 1))
    return ProductForm(cm.poisson_mean, labels)


def poisson_truncation(mean: float, tail: float = 1e-8) -> int:
    """Smallest K with Poisson(mean) CDF(K) >= 1 - tail."""
    if mean <= 0:
        return 0
    return int(sps.poisson.ppf(1.0 - tail, mean))


def truncated_support(form: ProductForm, tail: float = 1e-8):
    """Iterate occupancy vectors covering >= 1-tail Poisson mass per coordinate."""
    caps = [poisson_truncation(m, tail) for m in form.means]
    grids = np.indices([c + 1 for c in caps]).reshape(len(caps), -1).T
    for row in grids:
        yield tuple(int(v) for v in row)


def write_cell_means_csv(cm: CellMeans, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "arrival_rate", "hold_mean", "poisson_mean"])
        for n, (lam, tb, m) in enumerate(
                zip(cm.arrival_rate, cm.hold_mean, cm.poisson_mean), start=1):
            w.writerow([n, repr(lam), "" if tb is None else repr(tb), repr(m)])
