"""Aggregation of group-time effects, cluster-bootstrap inference, and the
robustness battery (pre-trend test, placebo intervention, overlap report).

Aggregation weights are proportional to each cell's treated count, so they
are non-negative by construction and sum to one within machine precision;
both properties are verified on every call. Uncertainty comes from a
unit-level (cluster) bootstrap: whole units are resampled with replacement
and given fresh identities, and each replicate either reruns the entire
pipeline (``full`` mode) or reuses the point-estimate nuisance predictions
(``fixed_nuisance`` mode, faster but approximate).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import chi2

from ._util import parallel_map
from .crossfit import NuisanceFits, ResidualPanel
from .didcore import (
    GroupTimeEffects,
    estimate_group_time,
    estimate_interacted_regression,
    group_time_cells,
)
from .errors import (
    BootstrapFailureError,
    ConfigError,
    DataError,
    EmptyResultError,
    EstimationError,
    InsufficientPrePeriodsError,
    LearnerError,
    NoPreCellsError,
)
from .panel import PanelDataset, PanelObservation, pivot_unit_time, subset_units

SCHEMES = ("overall", "event_time", "by_group")

WEIGHT_SUM_TOL = 1e-12
WEAK_OVERLAP_CLIP_SHARE = 0.10


# -- point aggregation -----------------------------------------------------------


@dataclass(frozen=True)
class EventPoint:
    att: float
    se: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None


@dataclass(frozen=True)
class GroupPoint:
    att: float
    se: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None


@dataclass(frozen=True)
class AggregatedResults:
    """Point summaries of tau(g, t); inference fields filled by the bootstrap."""

    overall_att: float
    weights_used: Mapping[tuple[int, int], float]
    ci_level: float
    schemes: tuple[str, ...]
    overall_se: Optional[float] = None
    overall_ci_low: Optional[float] = None
    overall_ci_high: Optional[float] = None
    event_curve: Mapping[int, EventPoint] = field(default_factory=dict)
    group_atts: Mapping[int, GroupPoint] = field(default_factory=dict)


def _check_weights(weights: Sequence[float], context: str) -> None:
    total = math.fsum(weights)
    if any(w < 0 for w in weights):
        raise EstimationError(f"negative aggregation weight in {context}")
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise EstimationError(
            f"aggregation weights in {context} sum to {total!r}, not 1")


def _weighted_att(cells: Mapping, context: str) -> tuple[float, dict]:
    total = sum(c.n_treated for c in cells.values())
    weights = {key: c.n_treated / total for key, c in cells.items()}
    _check_weights(list(weights.values()), context)
    att = math.fsum(weights[key] * cells[key].tau for key in cells)
    return att, weights


def overall_att(effects: GroupTimeEffects) -> tuple[float, dict]:
    """Treated-count-weighted mean of post-treatment cells, plus the weights."""
    post = effects.post_cells()
    if not post:
        raise EmptyResultError("no post-treatment cell to aggregate")
    return _weighted_att(post, "overall aggregation")


def event_curve_att(effects: GroupTimeEffects) -> dict[int, float]:
    """Per-event-time weighted means; negative e are placebo contrasts."""
    by_e: dict[int, dict] = {}
    for (g, t), cell in effects.cells.items():
        by_e.setdefault(t - g, {})[(g, t)] = cell
    return {e: _weighted_att(cells, f"event-time {e} aggregation")[0]
            for e, cells in sorted(by_e.items())}


def group_att(effects: GroupTimeEffects) -> dict[int, float]:
    """Per-cohort weighted means over post-treatment periods."""
    by_g: dict[int, dict] = {}
    for (g, t), cell in effects.post_cells().items():
        by_g.setdefault(g, {})[(g, t)] = cell
    return {g: _weighted_att(cells, f"cohort {g} aggregation")[0]
            for g, cells in sorted(by_g.items())}


def aggregate_schemes(effects: GroupTimeEffects, schemes: Sequence[str],
                      ci_level: float = 0.95) -> AggregatedResults:
    """Aggregate tau(g, t) under each requested scheme.

    The overall ATT is always computed (it is the headline estimate the
    bootstrap pivots on); the event curve and per-cohort summaries are
    populated when their schemes are requested.
    """
    bad = [s for s in schemes if s not in SCHEMES]
    if bad:
        raise ConfigError(f"unknown aggregation scheme(s) {bad}")
    if not 0 < ci_level < 1:
        raise ConfigError("ci_level must lie in (0, 1)")
    att, weights = overall_att(effects)
    event: dict[int, EventPoint] = {}
    groups: dict[int, GroupPoint] = {}
    if "event_time" in schemes:
        event = {e: EventPoint(att=v) for e, v in event_curve_att(effects).items()}
    if "by_group" in schemes:
        groups = {g: GroupPoint(att=v) for g, v in group_att(effects).items()}
    return AggregatedResults(overall_att=att, weights_used=weights,
                             ci_level=ci_level, schemes=tuple(schemes),
                             event_curve=event, group_atts=groups)


def aggregate(effects: GroupTimeEffects, scheme: str = "overall",
              ci_level: float = 0.95) -> AggregatedResults:
    """Single-scheme entry point; see :func:`aggregate_schemes`."""
    return aggregate_schemes(effects, (scheme,), ci_level)


def write_event_curve_csv(results: AggregatedResults, path) -> None:
    """Plot-ready event curve: columns e, att, ci_low, ci_high."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["e", "att", "ci_low", "ci_high"])
        for e, point in sorted(results.event_curve.items()):
            writer.writerow([e, repr(point.att),
                             "" if point.ci_low is None else repr(point.ci_low),
                             "" if point.ci_high is None else repr(point.ci_high)])


# -- bootstrap inference -----------------------------------------------------------


@dataclass(frozen=True)
class InferencePoint:
    se: Optional[float]
    ci_low: float
    ci_high: float
    n_reps: int


@dataclass(frozen=True)
class BootstrapInference:
    """Cluster-bootstrap standard errors and percentile CIs."""

    overall: InferencePoint
    event: Mapping[int, InferencePoint]
    group: Mapping[int, InferencePoint]
    n_reps: int
    n_failed: int
    mode: str
    ci_level: float
    seed: int


def _replicate_summaries(effects: GroupTimeEffects):
    att, _ = overall_att(effects)
    return att, event_curve_att(effects), group_att(effects)


def _summarize(values: list[float], ci_level: float) -> InferencePoint:
    arr = np.asarray(values, dtype=np.float64)
    se = float(arr.std(ddof=1)) if arr.size >= 2 else None
    alpha = 1.0 - ci_level
    lo, hi = np.quantile(arr, [alpha / 2.0, 1.0 - alpha / 2.0])
    return InferencePoint(se=se, ci_low=float(lo), ci_high=float(hi),
                          n_reps=int(arr.size))


def bootstrap(config, panel: PanelDataset, B: int, seed: int,
              mode: str = "full", fits: Optional[NuisanceFits] = None,
              threads: int = 1) -> BootstrapInference:
    """Unit-level bootstrap of the overall, event-time, and cohort summaries.

    Replicate r draws ``n_units`` units with replacement using seed
    ``seed + r`` and gives resampled units fresh identities. ``full`` mode
    reruns cross-fitting and estimation on each replicate; ``fixed_nuisance``
    reuses the point-estimate nuisance predictions looked up by original
    unit. Replicates whose resample admits no estimable cell are counted as
    failures; more than 20% failures aborts.
    """
    if B < 1:
        raise ConfigError("bootstrap B must be >= 1")
    if mode not in ("full", "fixed_nuisance"):
        raise ConfigError(f"unknown bootstrap mode {mode!r}")
    n_units = panel.n_units

    if mode == "fixed_nuisance":
        if fits is None:
            from .pipeline import estimate_effects
            fits = estimate_effects(panel, config).fits
        resid = ResidualPanel(panel=panel,
                              y_tilde=panel.outcomes - fits.g_hat,
                              d_tilde=panel.treatments - fits.m_hat,
                              fits=fits)
        ymat, present = pivot_unit_time(panel, resid.y_tilde)
        cohort_times = panel.cohort_times

    def one_replicate(r: int):
        rng = np.random.default_rng(seed + r)
        idx = rng.integers(0, n_units, size=n_units)
        try:
            if mode == "fixed_nuisance" and config.estimator == "contrast":
                cells, _ = group_time_cells(cohort_times[idx], ymat[idx],
                                            present[idx], panel.periods,
                                            config.control_rule,
                                            config.anticipation)
                if not cells:
                    raise EmptyResultError("no estimable cell in replicate")
                effects = GroupTimeEffects(cells=cells,
                                           control_rule=config.control_rule,
                                           anticipation=config.anticipation)
            else:
                originals = [panel.units[i] for i in idx]
                fresh = [f"b{k:06d}.{panel.units[i]}" for k, i in enumerate(idx)]
                bpanel = subset_units(panel, originals, fresh)
                if mode == "fixed_nuisance":
                    rows = np.concatenate([panel.rows_of_unit(u) for u in originals])
                    bresid = ResidualPanel(panel=bpanel,
                                           y_tilde=resid.y_tilde[rows],
                                           d_tilde=resid.d_tilde[rows])
                    effects = estimate_interacted_regression(
                        bresid, config.anticipation)
                else:
                    from .pipeline import estimate_effects
                    effects = estimate_effects(
                        bpanel, replace(config, seed=seed + r)).effects
            return _replicate_summaries(effects)
        except (DataError, EstimationError, LearnerError):
            return None

    outcomes = parallel_map(one_replicate, list(range(B)), threads=threads)
    overall_vals: list[float] = []
    event_vals: dict[int, list[float]] = {}
    group_vals: dict[int, list[float]] = {}
    n_failed = 0
    for out in outcomes:
        if out is None:
            n_failed += 1
            continue
        att, by_e, by_g = out
        overall_vals.append(att)
        for e, v in by_e.items():
            event_vals.setdefault(e, []).append(v)
        for g, v in by_g.items():
            group_vals.setdefault(g, []).append(v)

    if n_failed > 0.2 * B:
        raise BootstrapFailureError(
            f"{n_failed} of {B} bootstrap replicates failed to estimate")
    overall = _summarize(overall_vals, config.ci_level)
    event = {e: _summarize(v, config.ci_level) for e, v in sorted(event_vals.items())}
    group = {g: _summarize(v, config.ci_level) for g, v in sorted(group_vals.items())}
    return BootstrapInference(overall=overall, event=event, group=group,
                              n_reps=B, n_failed=n_failed, mode=mode,
                              ci_level=config.ci_level, seed=seed)


def merge_inference(results: AggregatedResults,
                    inference: BootstrapInference) -> AggregatedResults:
    """Attach bootstrap SEs and percentile CIs to point summaries."""
    event = {}
    for e, point in results.event_curve.items():
        inf = inference.event.get(e)
        if inf is None:
            event[e] = point
        else:
            event[e] = EventPoint(att=point.att, se=inf.se,
                                  ci_low=inf.ci_low, ci_high=inf.ci_high)
    groups = {}
    for g, point in results.group_atts.items():
        inf = inference.group.get(g)
        if inf is None:
            groups[g] = point
        else:
            groups[g] = GroupPoint(att=point.att, se=inf.se,
                                   ci_low=inf.ci_low, ci_high=inf.ci_high)
    return replace(results, overall_se=inference.overall.se,
                   overall_ci_low=inference.overall.ci_low,
                   overall_ci_high=inference.overall.ci_high,
                   event_curve=event, group_atts=groups)


# -- robustness battery -------------------------------------------------------------


@dataclass(frozen=True)
class PretrendPoint:
    e: int
    att: float
    se: Optional[float]
    z: float


@dataclass(frozen=True)
class PretrendReport:
    """Wald-type joint test that pre-treatment placebo contrasts are zero.

    The chi-square reference treats the bootstrap SEs as known, so the
    p-value is approximate.
    """

    statistic: float
    dof: int
    p_value: float
    per_e: tuple[PretrendPoint, ...]


def pretrend_test(effects: GroupTimeEffects,
                  inference: BootstrapInference) -> PretrendReport:
    """Sum of squared z-scores over pre-treatment event times, chi2 reference."""
    curve = event_curve_att(effects)
    pre_es = [e for e in sorted(curve) if e < -effects.anticipation]
    if not pre_es:
        raise NoPreCellsError("no pre-treatment event times available")
    points = []
    for e in pre_es:
        att = curve[e]
        inf = inference.event.get(e)
        se = inf.se if inf is not None else None
        if se is None:
            raise EstimationError(
                "pre-trend test needs bootstrap SEs (B >= 2) for every pre event time")
        if se > 0.0:
            z = att / se
        else:
            z = 0.0 if att == 0.0 else math.inf
        points.append(PretrendPoint(e=e, att=att, se=se, z=z))
    statistic = math.fsum(p.z ** 2 for p in points)
    dof = len(points)
    p_value = float(chi2.sf(statistic, dof)) if math.isfinite(statistic) else 0.0
    return PretrendReport(statistic=statistic, dof=dof, p_value=p_value,
                          per_e=tuple(points))


@dataclass(frozen=True)
class PlaceboReport:
    """Pseudo-ATT from shifting every cohort's adoption into its pre-period."""

    shift: int
    pseudo_att: float
    ci_low: Optional[float]
    ci_high: Optional[float]
    ci_level: float


def placebo_test(panel: PanelDataset, config, shift: int,
                 threads: int = 1) -> PlaceboReport:
    """Rerun the full pipeline on pre-treatment data with adoption moved back.

    Only observations strictly before each cohort's true adoption survive;
    cohort g is reassigned to g - shift. The entire pipeline (including
    nuisance re-estimation on the pre-period subsample) is rerun, so the
    pseudo-ATT should be indistinguishable from zero under a valid design.
    """
    if shift < 1:
        raise ConfigError("placebo shift must be >= 1")
    cohorts = sorted({c.first_treated for c in panel.cohort.values()
                      if c.ever_treated})
    if not cohorts:
        raise InsufficientPrePeriodsError("panel has no treated cohort")
    for g in cohorts:
        n_pre = sum(1 for t in panel.periods if t < g)
        if n_pre < shift + 1:
            raise InsufficientPrePeriodsError(
                f"cohort {g} has {n_pre} pre-treatment period(s); "
                f"shift={shift} needs at least {shift + 1}")
    observations = []
    for obs in panel.observations:
        cohort = panel.cohort[obs.unit_id]
        if cohort.ever_treated:
            if obs.time >= cohort.first_treated:
                continue
            d_new = 1 if obs.time >= cohort.first_treated - shift else 0
        else:
            d_new = 0
        observations.append(PanelObservation(obs.unit_id, obs.time, obs.outcome,
                                             d_new, obs.covariates))
    pseudo_panel = PanelDataset(observations, panel.covariate_names)

    from .pipeline import estimate_effects
    artifacts = estimate_effects(pseudo_panel, config)
    att, _ = overall_att(artifacts.effects)
    ci_low = ci_high = None
    if config.bootstrap_reps >= 1:
        inference = bootstrap(config, pseudo_panel, config.bootstrap_reps,
                              config.seed, config.bootstrap_mode,
                              fits=artifacts.fits, threads=threads)
        ci_low, ci_high = inference.overall.ci_low, inference.overall.ci_high
    return PlaceboReport(shift=shift, pseudo_att=att, ci_low=ci_low,
                         ci_high=ci_high, ci_level=config.ci_level)


@dataclass(frozen=True)
class OverlapReport:
    """Distribution of the estimated treatment propensities m_hat."""

    histogram: tuple[int, ...]
    bin_edges: tuple[float, ...]
    minimum: float
    maximum: float
    n_clipped: int
    n_obs: int
    share_outside: float
    weak_overlap: bool


def overlap_report(fits: NuisanceFits) -> OverlapReport:
    """20-bin histogram of m_hat on [0, 1] with common-support diagnostics.

    ``share_outside`` is the fraction of propensities outside [0.05, 0.95];
    the weak-overlap flag trips when clipping moved more than 10% of them.
    """
    m = np.asarray(fits.m_hat, dtype=np.float64)
    counts, edges = np.histogram(m, bins=20, range=(0.0, 1.0))
    share_outside = float(np.mean((m < 0.05) | (m > 0.95)))
    weak = fits.n_clipped > WEAK_OVERLAP_CLIP_SHARE * m.size
    return OverlapReport(histogram=tuple(int(c) for c in counts),
                         bin_edges=tuple(float(x) for x in edges),
                         minimum=float(m.min()), maximum=float(m.max()),
                         n_clipped=fits.n_clipped, n_obs=int(m.size),
                         share_outside=share_outside, weak_overlap=bool(weak))


@dataclass(frozen=True)
class DiagnosticsReport:
    pretrend: Optional[PretrendReport]
    placebo: Optional[PlaceboReport]
    overlap: OverlapReport

    def to_json_dict(self) -> dict:
        out: dict = {"overlap": {
            "histogram": list(self.overlap.histogram),
            "bin_edges": list(self.overlap.bin_edges),
            "min": self.overlap.minimum,
            "max": self.overlap.maximum,
            "n_clipped": self.overlap.n_clipped,
            "n_obs": self.overlap.n_obs,
            "share_outside_05_95": self.overlap.share_outside,
            "weak_overlap": self.overlap.weak_overlap,
        }}
        if self.pretrend is not None:
            out["pretrend"] = {
                "statistic": self.pretrend.statistic,
                "dof": self.pretrend.dof,
                "p_value": self.pretrend.p_value,
                "approximate": True,
                "per_e": [{"e": p.e, "att": p.att, "se": p.se, "z": p.z}
                          for p in self.pretrend.per_e],
            }
        else:
            out["pretrend"] = None
        if self.placebo is not None:
            out["placebo"] = {
                "shift": self.placebo.shift,
                "pseudo_att": self.placebo.pseudo_att,
                "ci_low": self.placebo.ci_low,
                "ci_high": self.placebo.ci_high,
                "ci_level": self.placebo.ci_level,
            }
        else:
            out["placebo"] = None
        return out
