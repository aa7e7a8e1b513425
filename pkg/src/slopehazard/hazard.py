"""Hazard assembly and scenario differencing.

A hazard value is the product of two probabilities for one site and
year: the occurrence probability ``p`` from the regression model and
the intensity ``i_q``, the chance that a landslide (given one occurs)
exceeds the severity threshold ``a_q``.  The hypothesised surface
replaces the observed trigger covariates with return levels so the
product reads "hazard at severity q if the P-year trigger recurs".

Scenario differencing compares two surfaces on the same grid cellwise
and classifies each site as increase, decrease, or no change inside a
symmetric relative band.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import _format_float
from .egpd import _log1mexp
from .frequency import ReturnLevelSet
from .network import RegressionModel

__all__ = [
    "SCENARIO_TAGS",
    "HAZARD_CLASS_CUTS",
    "HAZARD_CLASS_LABELS",
    "H_FLOOR",
    "HazardError",
    "SeverityThreshold",
    "HazardComponents",
    "HazardSurface",
    "ScenarioChange",
    "severity_threshold",
    "intensity",
    "hazard_record",
    "hypothesised_hazard",
    "scenario_change",
    "hazard_class",
    "hazard_area_table",
    "read_site_covariates",
    "write_hazard_surfaces",
    "read_hazard_surfaces",
    "write_scenario_change",
]

SCENARIO_TAGS = ("historical", "ssp245", "ssp585", "custom")

# Display bins for hazard values; label k covers [cut_{k-1}, cut_k).
HAZARD_CLASS_CUTS = (0.01, 0.05, 0.10, 0.25, 0.50)
HAZARD_CLASS_LABELS = ("None", "Very Low", "Low", "Moderate", "High",
                       "Very High")

# Relative change against a smaller current hazard is reported as
# indeterminate instead of an exploding percentage.
H_FLOOR = 1e-6

_SURFACE_HEADER = ["site_id", "q", "return_period", "scenario",
                   "p", "i_q", "h", "hazard_class"]
_CHANGE_HEADER = _SURFACE_HEADER + ["rel_change", "change_class"]


class HazardError(ValueError):
    """Invalid hazard input; ``report`` lists every gap found."""

    def __init__(self, message: str, report: list[str] | None = None):
        report = list(report or [])
        detail = ""
        if report:
            shown = "; ".join(report[:10])
            more = f" (+{len(report) - 10} more)" if len(report) > 10 else ""
            detail = f" [{shown}{more}]"
        super().__init__(message + detail)
        self.report = report


@dataclass(frozen=True)
class SeverityThreshold:
    """Severity level q paired with the area-density fraction a_q that
    the pooled positive observations exceed with probability 1 - q.

    Thresholds built by severity_threshold always carry a_q in (0, 1);
    direct construction only requires a positive exceedance level.
    """

    q: float
    a_q: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.q) and 0.0 < self.q < 1.0):
            raise HazardError(f"q must lie in (0, 1), got {self.q!r}")
        if not (math.isfinite(self.a_q) and self.a_q > 0.0):
            raise HazardError(f"a_q must be positive, got {self.a_q!r}")


class HazardComponents(NamedTuple):
    p: float
    i_q: float
    h: float


@dataclass
class HazardSurface:
    """Per-site hazard for one severity level and return period."""

    q: float
    return_period: float
    scenario: str
    site_ids: list[str]
    p: np.ndarray
    i_q: np.ndarray
    h: np.ndarray

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIO_TAGS:
            raise HazardError(
                f"scenario must be one of {SCENARIO_TAGS}, got {self.scenario!r}")
        n = len(self.site_ids)
        self.p = np.asarray(self.p, dtype=float)
        self.i_q = np.asarray(self.i_q, dtype=float)
        self.h = np.asarray(self.h, dtype=float)
        if not (self.p.shape == self.i_q.shape == self.h.shape == (n,)):
            raise HazardError("surface arrays must match the site list")
        if n and not (np.all(self.h >= 0.0) and np.all(self.h <= 1.0)):
            raise HazardError("hazard values must lie in [0, 1]")

    @property
    def n(self) -> int:
        return len(self.site_ids)


@dataclass
class ScenarioChange:
    """Cellwise comparison of a future surface against a current one.

    The value columns (p, i_q, h) describe the future surface; the
    relative change is taken against the current one.
    """

    q: float
    return_period: float
    scenario_current: str
    scenario_future: str
    site_ids: list[str]
    p: np.ndarray
    i_q: np.ndarray
    h: np.ndarray
    rel_change: np.ndarray
    change_class: list[str] = field(default_factory=list)


def severity_threshold(pooled_positive_areas, q: float) -> SeverityThreshold:
    """Empirical q-quantile of the pooled positive area densities.

    Linear interpolation between order statistics at position
    1 + (n - 1) q, over positive observations only: pooling the ~90%
    zero records would pin every low quantile at zero.
    """
    arr = np.asarray(pooled_positive_areas, dtype=float)
    if arr.size == 0:
        raise HazardError("severity threshold needs at least one positive area")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise HazardError("area densities must lie in (0, 1)")
    if not (isinstance(q, (int, float)) and math.isfinite(q) and 0.0 < q < 1.0):
        raise HazardError(f"q must lie in (0, 1), got {q!r}")
    return SeverityThreshold(q=float(q), a_q=float(np.quantile(arr, q)))


def _survival_at_scales(a_q: float, kappa: float, sigma, xi: float):
    # complement without forming the CDF: near-one survival would lose
    # all precision through 1 - F
    y = np.log1p(xi * a_q / np.asarray(sigma, dtype=float)) / xi
    with np.errstate(divide="ignore"):
        return -np.expm1(kappa * _log1mexp(y))


def intensity(sigma, kappa: float, xi: float, threshold: SeverityThreshold):
    """Exceedance probability of a_q under the fitted size distribution.

    Vectorized over sigma; scalar in, scalar out.  Strictly increasing
    in sigma and strictly decreasing in a_q.
    """
    if not (math.isfinite(kappa) and kappa > 0.0):
        raise HazardError(f"kappa must be positive, got {kappa!r}")
    if not (math.isfinite(xi) and xi > 0.0):
        raise HazardError(f"xi must be positive, got {xi!r}")
    arr = np.asarray(sigma, dtype=float)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise HazardError("sigma must be positive and finite")
    out = _survival_at_scales(threshold.a_q, kappa, arr, xi)
    return float(out[0]) if scalar else out


def hazard_record(features, model: RegressionModel,
                  threshold: SeverityThreshold) -> HazardComponents:
    """Hazard for one raw feature vector: h = p * i_q, components kept."""
    arr = np.asarray(features, dtype=float)
    if arr.ndim != 1 or arr.size != model.schema.width:
        raise HazardError(
            f"feature vector has width {arr.size if arr.ndim == 1 else arr.shape},"
            f" model schema expects {model.schema.width}")
    out = model.predict(arr[None, :])
    p = float(out.p[0])
    i_q = intensity(float(out.sigma[0]), model.kappa, model.xi, threshold)
    return HazardComponents(p=p, i_q=i_q, h=p * i_q)


def _as_thresholds(thresholds) -> list[SeverityThreshold]:
    if isinstance(thresholds, SeverityThreshold):
        return [thresholds]
    out = list(thresholds)
    if not out:
        raise HazardError("at least one severity threshold is required")
    if any(not isinstance(t, SeverityThreshold) for t in out):
        raise HazardError("thresholds must be SeverityThreshold values")
    return out


def _site_ndvi(value, site: str, name: str, report: list[str]) -> float:
    if isinstance(value, dict):
        if name not in value:
            report.append(f"site {site!r} missing time-averaged value for {name!r}")
            return math.nan
        return float(value[name])
    return float(value)


def hypothesised_hazard(model: RegressionModel, return_levels, static_covariates,
                        time_averaged_ndvi, thresholds,
                        scenario: str = "historical") -> list[HazardSurface]:
    """Hazard surfaces with trigger covariates replaced by return levels.

    Per site and return period, the dynamic slots take (rl_max, rl_mean,
    analogue_sd), any feature named ndvi* takes the site's time-averaged
    value, and the remaining features come from ``static_covariates``
    (site id -> name -> value).  ``time_averaged_ndvi`` maps site id to
    either a single value for all ndvi slots or a name -> value mapping.
    Returns one surface per (q, P), ordered by (q, P).

    Every gap across all sites is collected and reported in one error
    rather than stopping at the first.
    """
    thresholds = _as_thresholds(thresholds)
    by_period: dict[float, dict[str, ReturnLevelSet]] = {}
    sites: set[str] = set()
    for rl in return_levels:
        by_period.setdefault(rl.return_period, {})[rl.site_id] = rl
        sites.add(rl.site_id)
    if not sites:
        return []
    ordered_sites = sorted(sites)
    periods = sorted(by_period)

    schema = model.schema
    ndvi_names = [f.name for f in schema.features if f.name.startswith("ndvi")]
    static_names = [f.name for f in schema.features
                    if f.kind == "static" and not f.name.startswith("ndvi")]
    dynamic_names = [f.name for f in schema.features if f.kind == "dynamic"]
    known_dynamic = {"precip_max", "precip_mean", "precip_sd"}
    unknown = [n for n in dynamic_names if n not in known_dynamic]
    if unknown:
        raise HazardError(
            f"no return-level substitution defined for dynamic features {unknown}")

    report: list[str] = []
    for P in periods:
        for site in ordered_sites:
            if site not in by_period[P]:
                report.append(f"site {site!r} missing return levels for P={P:g}")
    for site in ordered_sites:
        if static_names and site not in static_covariates:
            report.append(f"site {site!r} missing static covariates")
        else:
            for name in static_names:
                if name not in static_covariates.get(site, {}):
                    report.append(f"site {site!r} missing static covariate {name!r}")
        if ndvi_names and site not in time_averaged_ndvi:
            report.append(f"site {site!r} missing time-averaged ndvi")
    if report:
        raise HazardError("hypothesised hazard inputs incomplete", report)

    ndvi_report: list[str] = []
    surfaces = []
    for P in periods:
        X = np.empty((len(ordered_sites), schema.width))
        for i, site in enumerate(ordered_sites):
            rl = by_period[P][site]
            for j, feat in enumerate(schema.features):
                if feat.name == "precip_max":
                    X[i, j] = rl.rl_max
                elif feat.name == "precip_mean":
                    X[i, j] = rl.rl_mean
                elif feat.name == "precip_sd":
                    X[i, j] = rl.analogue_sd
                elif feat.name in ndvi_names:
                    X[i, j] = _site_ndvi(time_averaged_ndvi[site], site,
                                         feat.name, ndvi_report)
                else:
                    X[i, j] = float(static_covariates[site][feat.name])
        if ndvi_report:
            raise HazardError("hypothesised hazard inputs incomplete",
                              sorted(set(ndvi_report)))
        out = model.predict(X)
        for thr in thresholds:
            i_q = intensity(out.sigma, model.kappa, model.xi, thr)
            surfaces.append(HazardSurface(
                q=thr.q, return_period=float(P), scenario=scenario,
                site_ids=list(ordered_sites), p=out.p.copy(), i_q=i_q,
                h=out.p * i_q))
    surfaces.sort(key=lambda s: (s.q, s.return_period))
    return surfaces


def scenario_change(current: HazardSurface, future: HazardSurface,
                    no_change_band: float = 0.20,
                    h_floor: float = H_FLOOR) -> ScenarioChange:
    """Relative change (future - current) / current per site, classified.

    Changes inside the symmetric band are no_change; sites whose current
    hazard sits below ``h_floor`` are indeterminate (their percentage
    would be meaningless).  Swapping the surfaces maps increase to
    decrease and back whenever both relative changes clear the band.
    """
    if not (0.0 <= no_change_band < 1.0):
        raise HazardError(f"no_change_band must lie in [0, 1), got {no_change_band!r}")
    if current.q != future.q or current.return_period != future.return_period:
        raise HazardError(
            f"surfaces disagree on the grid cell: "
            f"(q={current.q:g}, P={current.return_period:g}) vs "
            f"(q={future.q:g}, P={future.return_period:g})")
    if set(current.site_ids) != set(future.site_ids):
        only_cur = sorted(set(current.site_ids) - set(future.site_ids))
        only_fut = sorted(set(future.site_ids) - set(current.site_ids))
        raise HazardError("surfaces cover different sites",
                          [f"only in current: {s!r}" for s in only_cur]
                          + [f"only in future: {s!r}" for s in only_fut])

    fut_index = {site: i for i, site in enumerate(future.site_ids)}
    order = np.array([fut_index[s] for s in current.site_ids])
    h_cur = current.h
    h_fut = future.h[order]
    rel = np.full(current.n, math.nan)
    classes = []
    for i in range(current.n):
        if h_cur[i] < h_floor:
            classes.append("indeterminate")
            continue
        rel[i] = (h_fut[i] - h_cur[i]) / h_cur[i]
        if rel[i] > no_change_band:
            classes.append("increase")
        elif rel[i] < -no_change_band:
            classes.append("decrease")
        else:
            classes.append("no_change")
    return ScenarioChange(
        q=current.q, return_period=current.return_period,
        scenario_current=current.scenario, scenario_future=future.scenario,
        site_ids=list(current.site_ids), p=future.p[order].copy(),
        i_q=future.i_q[order].copy(), h=h_fut.copy(), rel_change=rel,
        change_class=classes)


def hazard_class(h: float, cuts=HAZARD_CLASS_CUTS,
                 labels=HAZARD_CLASS_LABELS) -> str:
    """Display label for a hazard value; label k covers [cut_{k-1}, cut_k)."""
    if len(labels) != len(cuts) + 1:
        raise HazardError("need exactly one more label than cut points")
    if not (math.isfinite(h) and 0.0 <= h <= 1.0):
        raise HazardError(f"hazard value must lie in [0, 1], got {h!r}")
    return labels[int(np.searchsorted(np.asarray(cuts), h, side="right"))]


def hazard_area_table(surface: HazardSurface, su_areas: dict,
                      n_bins: int = 3) -> list[dict]:
    """Joint (hazard, area) classes for bivariate choropleth rendering.

    Both variables are cut at their own empirical quantiles into
    ``n_bins`` lower-inclusive bins, so any monotone relabeling of the
    areas leaves the assignment unchanged.  Rows carry 1-based bin
    indices and the combined code "<h_bin>-<area_bin>".
    """
    if n_bins < 2:
        raise HazardError(f"n_bins must be at least 2, got {n_bins!r}")
    missing = [s for s in surface.site_ids if s not in su_areas]
    if missing:
        raise HazardError("missing slope-unit areas",
                          [f"site {s!r} has no area" for s in missing])
    areas = np.array([float(su_areas[s]) for s in surface.site_ids])
    if surface.n and (not np.all(np.isfinite(areas)) or np.any(areas <= 0.0)):
        raise HazardError("slope-unit areas must be positive and finite")

    probs = [k / n_bins for k in range(1, n_bins)]
    h_edges = np.quantile(surface.h, probs) if surface.n else np.array([])
    a_edges = np.quantile(areas, probs) if surface.n else np.array([])
    rows = []
    for i, site in enumerate(surface.site_ids):
        h_bin = int(np.searchsorted(h_edges, surface.h[i], side="right")) + 1
        a_bin = int(np.searchsorted(a_edges, areas[i], side="right")) + 1
        rows.append({"site_id": site, "h": float(surface.h[i]),
                     "area": float(areas[i]), "h_bin": h_bin, "area_bin": a_bin,
                     "code": f"{h_bin}-{a_bin}"})
    return rows


def read_site_covariates(path) -> tuple[dict, dict]:
    """Site table CSV (site_id plus one column per feature) split into
    static covariates and time-averaged ndvi values.

    Columns whose name starts with ndvi feed the ndvi mapping
    (site -> name -> value); every other column feeds the static
    mapping.  Returns (static, ndvi).
    """
    static: dict[str, dict[str, float]] = {}
    ndvi: dict[str, dict[str, float]] = {}
    report: list[str] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "site_id" or len(header) < 2:
            raise HazardError(
                f"site table must start with a site_id column, got {header}")
        names = header[1:]
        if len(set(names)) != len(names):
            raise HazardError(f"duplicate columns in site table header: {names}")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                report.append(f"row {row_no}: expected {len(header)} fields,"
                              f" got {len(row)}")
                continue
            site = row[0]
            if site in static or site in ndvi:
                report.append(f"row {row_no}: duplicate site {site!r}")
                continue
            static[site] = {}
            ndvi[site] = {}
            for name, text in zip(names, row[1:]):
                try:
                    value = float(text)
                except ValueError:
                    report.append(f"row {row_no}: {name} is not a number: {text!r}")
                    continue
                if not math.isfinite(value):
                    report.append(f"row {row_no}: {name} is not finite")
                    continue
                (ndvi if name.startswith("ndvi") else static)[site][name] = value
    if report:
        raise HazardError("site covariate table invalid", report)
    return static, ndvi


def write_hazard_surfaces(surfaces, path) -> None:
    """Long-format CSV, one row per (site, q, P), in surface order."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_SURFACE_HEADER)
        for s in surfaces:
            for i, site in enumerate(s.site_ids):
                writer.writerow([
                    site, _format_float(s.q), _format_float(s.return_period),
                    s.scenario, _format_float(s.p[i]), _format_float(s.i_q[i]),
                    _format_float(s.h[i]), hazard_class(float(s.h[i])),
                ])


def read_hazard_surfaces(path) -> list[HazardSurface]:
    """Inverse of write_hazard_surfaces; groups rows by (q, P, scenario)."""
    groups: dict[tuple, dict[str, list]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _SURFACE_HEADER:
            raise HazardError(f"expected header {_SURFACE_HEADER}, got {header}")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(_SURFACE_HEADER):
                raise HazardError(f"row {row_no}: expected "
                                  f"{len(_SURFACE_HEADER)} fields, got {len(row)}")
            try:
                key = (float(row[1]), float(row[2]), row[3])
                values = (row[0], float(row[4]), float(row[5]), float(row[6]))
            except ValueError as exc:
                raise HazardError(f"row {row_no}: {exc}") from exc
            bucket = groups.setdefault(key, {"site": [], "p": [], "i": [], "h": []})
            bucket["site"].append(values[0])
            bucket["p"].append(values[1])
            bucket["i"].append(values[2])
            bucket["h"].append(values[3])
    return [HazardSurface(q=q, return_period=P, scenario=tag,
                          site_ids=b["site"], p=np.array(b["p"]),
                          i_q=np.array(b["i"]), h=np.array(b["h"]))
            for (q, P, tag), b in groups.items()]


def write_scenario_change(change: ScenarioChange, path) -> None:
    """Surface CSV (future values) with rel_change and change_class added."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_CHANGE_HEADER)
        for i, site in enumerate(change.site_ids):
            writer.writerow([
                site, _format_float(change.q),
                _format_float(change.return_period), change.scenario_future,
                _format_float(change.p[i]), _format_float(change.i_q[i]),
                _format_float(change.h[i]), hazard_class(float(change.h[i])),
                _format_float(change.rel_change[i]), change.change_class[i],
            ])
