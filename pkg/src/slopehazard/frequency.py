"""Per-site trigger-frequency models and return levels.

Annual maximum and annual mean precipitation are both modeled as
eGPD(kappa, sigma(site), xi) with the two shape parameters shared
across sites and one scale per site.  The pooled likelihood is
maximized by alternating per-site scale updates with a shared shape
update; each half-step can only raise the pooled log-likelihood, so
the alternation is monotone.

Return levels are eGPD quantiles at level 1 - 1/(P * n_y), and the
analogue year supplies the precipitation standard deviation feature
that a return-level vector cannot provide by itself.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .data import _format_float
from .egpd import (
    EgpdParams,
    egpd_logpdf_at_scales,
    egpd_logpdf_gradients_at_scales,
    egpd_quantile,
)

__all__ = [
    "FrequencyFitError",
    "TriggerFrequencyModel",
    "ReturnLevelSet",
    "YearlySummary",
    "fit_frequency",
    "return_level",
    "analogue_year",
    "build_return_level_sets",
    "read_trigger_series",
    "write_return_level_sets",
    "read_return_level_sets",
]

_LOG_BOUND = 35.0
_MAX_ALTERNATIONS = 500
_GRAD_TOL = 1e-9
# Lower bound for the tail index.  Light-tailed samples push the xi
# MLE to zero where the family is undefined; pinning at a tiny floor
# yields the boundary-constrained fit instead of a failure.
_XI_FLOOR = 1e-8


class FrequencyFitError(RuntimeError):
    """Raised when the alternating fit fails to converge.

    ``phase`` names the half-step that failed ("scale" or "shape") and
    ``site_id`` identifies the offending series where applicable.
    """

    def __init__(self, message: str, *, phase: str, site_id: str | None = None):
        detail = f"{phase} phase"
        if site_id is not None:
            detail += f", site {site_id!r}"
        super().__init__(f"{message} ({detail})")
        self.phase = phase
        self.site_id = site_id


@dataclass(frozen=True)
class TriggerFrequencyModel:
    kappa: float
    xi: float
    scales: dict[str, float]
    variable: str
    n_y: int = 1

    def __post_init__(self):
        for name, value in (("kappa", self.kappa), ("xi", self.xi)):
            if not (math.isfinite(value) and value > 0.0):
                raise ValueError(f"{name} must be a finite positive real")
        if self.variable not in ("annual_max", "annual_mean"):
            raise ValueError("variable must be 'annual_max' or 'annual_mean'")
        if self.n_y < 1:
            raise ValueError("n_y must be >= 1")
        for site, scale in self.scales.items():
            if not (math.isfinite(scale) and scale > 0.0):
                raise ValueError(f"scale for site {site!r} must be positive")

    @property
    def sites(self) -> tuple[str, ...]:
        return tuple(self.scales)


@dataclass(frozen=True)
class ReturnLevelSet:
    site_id: str
    return_period: int
    rl_mean: float
    rl_max: float
    analogue_year: int
    analogue_sd: float
    # set when rl_max < rl_mean, which a sane pair of fits should not
    # produce; downstream consumers may warn but the row is still valid
    rl_inverted: bool = False


@dataclass(frozen=True)
class YearlySummary:
    year: int
    mean: float
    max: float
    sd: float


def _validate_series(series: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    if not series:
        raise ValueError("series must contain at least one site")
    out = {}
    for site, values in series.items():
        arr = np.asarray(values, dtype=float)
        if arr.ndim != 1 or arr.size < 5:
            raise ValueError(f"site {site!r} needs at least 5 yearly values")
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
            raise ValueError(f"site {site!r} has non-finite or non-positive values")
        out[str(site)] = arr
    return out


def _site_loglik(values: np.ndarray, kappa: float, sigma: float, xi: float) -> float:
    return float(np.sum(egpd_logpdf_at_scales(values, kappa, sigma, xi)))


def _pooled_loglik(series, kappa: float, scales, xi: float) -> float:
    return sum(_site_loglik(v, kappa, scales[s], xi) for s, v in series.items())


def _maximize(loglik, gradient, theta0: np.ndarray, *, phase: str,
              site_id: str | None = None,
              valid=None) -> tuple[np.ndarray, bool]:
    """Two-phase ascent over an open parameter region.

    Armijo steepest ascent carries the iterate into the quadratic
    basin; a damped Newton pass (finite-difference Jacobian of the
    analytic gradient, accepted when the gradient norm shrinks without
    giving up likelihood) finishes where objective differences fall
    below double resolution.  Trial points rejected by ``valid`` are
    treated as likelihood decreases.

    Returns the best point found and whether the gradient criterion was
    met there.  A stall short of the criterion (for example against the
    edge of the valid region) is reported, not raised: the caller's
    outer iteration decides whether progress has genuinely stopped.
    Only a parameter running to the log-scale boundary raises.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    ll = loglik(theta)
    step = 1.0
    for _ in range(10_000):
        if np.max(np.abs(theta)) > _LOG_BOUND:
            raise FrequencyFitError("parameters ran to the boundary",
                                    phase=phase, site_id=site_id)
        grad = gradient(theta)
        if np.max(np.abs(grad)) < 1e-3:
            break
        direction = grad / np.linalg.norm(grad)
        trial = step
        improved = False
        while trial > 1e-14:
            cand = theta + trial * direction
            if valid is not None and not valid(cand):
                trial /= 2.0
                continue
            cand_ll = loglik(cand)
            if cand_ll > ll:
                theta, ll = cand, cand_ll
                step = min(trial * 2.0, 1e3)
                improved = True
                break
            trial /= 2.0
        if not improved:
            break

    grad = gradient(theta)
    gnorm = float(np.max(np.abs(grad)))
    slack = 1e-8 * max(1.0, abs(ll))
    n = theta.size
    for _ in range(200):
        if gnorm < _GRAD_TOL:
            return theta, True
        if np.max(np.abs(theta)) > _LOG_BOUND:
            raise FrequencyFitError("parameters ran to the boundary",
                                    phase=phase, site_id=site_id)
        hess = np.empty((n, n))
        for j in range(n):
            h = 1e-6 * max(1.0, abs(theta[j]))
            up = theta.copy()
            up[j] += h
            down = theta.copy()
            down[j] -= h
            if valid is not None and not (valid(up) and valid(down)):
                h = 1e-8 * max(1.0, abs(theta[j]))
                up = theta.copy()
                up[j] += h
                down = theta.copy()
                down[j] -= h
            hess[:, j] = (gradient(up) - gradient(down)) / (2.0 * h)
        hess = 0.5 * (hess + hess.T)
        try:
            newton = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            newton = grad / max(gnorm, 1e-12)
        trial = 1.0
        improved = False
        while trial > 1e-12:
            cand = theta + trial * newton
            if np.max(np.abs(cand)) > _LOG_BOUND or (
                    valid is not None and not valid(cand)):
                trial /= 2.0
                continue
            cand_grad = gradient(cand)
            cand_norm = float(np.max(np.abs(cand_grad)))
            cand_ll = loglik(cand)
            if cand_norm < gnorm and cand_ll >= ll - slack:
                theta, grad, gnorm, ll = cand, cand_grad, cand_norm, cand_ll
                improved = True
                break
            trial /= 2.0
        if not improved:
            return theta, gnorm < _GRAD_TOL
    return theta, gnorm < _GRAD_TOL


def _ascend_scale(values: np.ndarray, kappa: float, xi: float,
                  sigma: float, site_id: str) -> tuple[float, bool]:
    """Maximize the site log-likelihood over log sigma."""

    def loglik(theta):
        return _site_loglik(values, kappa, math.exp(theta[0]), xi) / values.size

    def gradient(theta):
        s = math.exp(theta[0])
        _, d_sigma, _ = egpd_logpdf_gradients_at_scales(values, kappa, s, xi)
        return np.array([float(np.mean(d_sigma)) * s])

    theta, converged = _maximize(loglik, gradient, np.array([math.log(sigma)]),
                                 phase="scale", site_id=site_id)
    return math.exp(theta[0]), converged


def _ascend_shapes(series, kappa: float, scales,
                   xi: float) -> tuple[float, float, bool]:
    """Maximize the pooled log-likelihood over (log kappa, xi).

    The tail index stays on its natural scale: a log parametrization
    multiplies its gradient by xi, which manufactures a spurious
    stationary ridge along xi -> 0 that the alternation cannot leave.
    A one-dimensional pass over log kappa runs first so that progress
    continues even while xi sits against its lower bound, where every
    joint ascent direction would be clipped to nothing.

    Samples whose likelihood keeps increasing as xi -> 0 have their
    constrained optimum on the light-tail boundary.  When the joint
    pass stalls at the floor with the xi gradient still pointing below
    it, xi is pinned there, kappa is polished alone, and the half-step
    counts as converged.
    """
    n = sum(v.size for v in series.values())

    def pooled(k, x):
        return _pooled_loglik(series, k, scales, x) / n

    def grads(k, x):
        g_kappa = 0.0
        g_xi = 0.0
        for site, values in series.items():
            d_kappa, _, d_xi = egpd_logpdf_gradients_at_scales(
                values, k, scales[site], x)
            g_kappa += float(np.sum(d_kappa))
            g_xi += float(np.sum(d_xi))
        return g_kappa / n, g_xi / n

    def ascend_kappa(kappa0: float, x: float) -> tuple[float, bool]:
        def loglik_k(theta):
            return pooled(math.exp(theta[0]), x)

        def gradient_k(theta):
            k = math.exp(theta[0])
            g_kappa, _ = grads(k, x)
            return np.array([g_kappa * k])

        theta, ok = _maximize(loglik_k, gradient_k,
                              np.array([math.log(kappa0)]), phase="shape")
        return math.exp(theta[0]), ok

    kappa, _ = ascend_kappa(kappa, xi)

    def loglik(theta):
        return pooled(math.exp(theta[0]), theta[1])

    def gradient(theta):
        k = math.exp(theta[0])
        g_kappa, g_xi = grads(k, theta[1])
        return np.array([g_kappa * k, g_xi])

    theta, converged = _maximize(loglik, gradient,
                                 np.array([math.log(kappa), xi]),
                                 phase="shape",
                                 valid=lambda t: t[1] >= _XI_FLOOR)
    kappa, xi = math.exp(theta[0]), theta[1]
    if not converged and xi <= 16.0 * _XI_FLOOR and gradient(theta)[1] < 0.0:
        kappa, converged = ascend_kappa(kappa, xi)
    return kappa, xi, converged


def fit_frequency(series: dict[str, "np.ndarray"], variable: str,
                  n_y: int = 1) -> TriggerFrequencyModel:
    """Fit shared (kappa, xi) and per-site scales by alternating MLE.

    Each alternation updates every site scale at fixed shapes, then the
    shared shapes at fixed scales; both half-steps maximize the same
    pooled log-likelihood, which therefore never decreases.
    """
    data = _validate_series(series)
    kappa, xi = 1.0, 0.3
    scales = {site: float(np.mean(values)) for site, values in data.items()}
    last_ll = -math.inf
    for _ in range(_MAX_ALTERNATIONS):
        settled = True
        for site, values in data.items():
            scales[site], ok = _ascend_scale(values, kappa, xi,
                                             scales[site], site)
            settled = settled and ok
        kappa, xi, ok = _ascend_shapes(data, kappa, scales, xi)
        settled = settled and ok
        ll = _pooled_loglik(data, kappa, scales, xi)
        if ll < last_ll - 1e-9 * max(1.0, abs(ll)):
            raise FrequencyFitError("pooled likelihood decreased", phase="shape")
        if settled and ll - last_ll < 1e-12 * max(1.0, abs(ll)):
            return TriggerFrequencyModel(kappa=kappa, xi=xi, scales=dict(scales),
                                         variable=variable, n_y=n_y)
        if not settled and ll - last_ll < 1e-13 * max(1.0, abs(ll)):
            raise FrequencyFitError(
                "alternation stalled away from a stationary point",
                phase="shape")
        last_ll = ll
    raise FrequencyFitError("alternation cap reached before convergence",
                            phase="shape")


def return_level(model: TriggerFrequencyModel, site: str, P: float) -> float:
    """Level exceeded once per P years: the eGPD quantile at 1 - 1/(P n_y)."""
    if site not in model.scales:
        raise KeyError(f"unknown site {site!r}")
    level = 1.0 - 1.0 / (P * model.n_y)
    if not 0.0 < level < 1.0:
        raise ValueError("return period must satisfy P * n_y > 1")
    return float(egpd_quantile(level, EgpdParams(
        kappa=model.kappa, sigma=model.scales[site], xi=model.xi)))


def analogue_year(observed: list[YearlySummary], target_mean: float,
                  target_max: float) -> tuple[int, float]:
    """Observed year Euclidean-closest to (target_mean, target_max).

    Ties go to the most recent year.
    """
    if not observed:
        raise ValueError("observed yearly summaries must be nonempty")
    best: YearlySummary | None = None
    best_d2 = math.inf
    for row in observed:
        d2 = (row.mean - target_mean) ** 2 + (row.max - target_max) ** 2
        if d2 < best_d2 or (d2 == best_d2 and best is not None
                            and row.year > best.year):
            best, best_d2 = row, d2
    assert best is not None
    return best.year, best.sd


def build_return_level_sets(max_model: TriggerFrequencyModel,
                            mean_model: TriggerFrequencyModel,
                            observed: list[YearlySummary],
                            periods: list[int]) -> list[ReturnLevelSet]:
    """One ReturnLevelSet per (site, period).

    The analogue year is selected once per period against the
    area-aggregate yearly series, using the across-site averages of the
    two return levels as the target, so analogue_year and analogue_sd
    are constant across sites for a fixed period.
    """
    if set(max_model.scales) != set(mean_model.scales):
        raise ValueError("max and mean models cover different sites")
    if not periods:
        raise ValueError("periods must be nonempty")
    sites = sorted(max_model.scales)
    out: list[ReturnLevelSet] = []
    for P in periods:
        rl_max = {s: return_level(max_model, s, P) for s in sites}
        rl_mean = {s: return_level(mean_model, s, P) for s in sites}
        target_max = sum(rl_max.values()) / len(sites)
        target_mean = sum(rl_mean.values()) / len(sites)
        year, sd = analogue_year(observed, target_mean, target_max)
        for s in sites:
            out.append(ReturnLevelSet(
                site_id=s, return_period=int(P),
                rl_mean=rl_mean[s], rl_max=rl_max[s],
                analogue_year=year, analogue_sd=sd,
                rl_inverted=rl_max[s] < rl_mean[s]))
    return out


_SERIES_HEADER = ["site_id", "year", "precip_mean", "precip_max", "precip_sd"]


def read_trigger_series(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray],
                                       list[YearlySummary]]:
    """Read the per-site yearly trigger table.

    Returns (max series, mean series, area-aggregate yearly summaries);
    the aggregate averages each year's columns across reporting sites.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _SERIES_HEADER:
            raise ValueError(
                f"expected header {_SERIES_HEADER}, got {header}")
        rows = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(_SERIES_HEADER):
                raise ValueError(f"row {lineno}: expected "
                                 f"{len(_SERIES_HEADER)} columns")
            site = row[0]
            try:
                year = int(row[1])
                mean_v, max_v, sd_v = (float(row[2]), float(row[3]),
                                       float(row[4]))
            except ValueError as exc:
                raise ValueError(f"row {lineno}: {exc}") from None
            if not all(map(math.isfinite, (mean_v, max_v, sd_v))):
                raise ValueError(f"row {lineno}: non-finite value")
            if (site, year) in seen:
                raise ValueError(f"row {lineno}: duplicate (site_id, year)")
            seen.add((site, year))
            rows.append((site, year, mean_v, max_v, sd_v))
    if not rows:
        raise ValueError("trigger series file has no data rows")
    max_series: dict[str, list[float]] = {}
    mean_series: dict[str, list[float]] = {}
    by_year: dict[int, list[tuple[float, float, float]]] = {}
    for site, year, mean_v, max_v, sd_v in sorted(rows):
        mean_series.setdefault(site, []).append(mean_v)
        max_series.setdefault(site, []).append(max_v)
        by_year.setdefault(year, []).append((mean_v, max_v, sd_v))
    summaries = [
        YearlySummary(year=year,
                      mean=float(np.mean([t[0] for t in triples])),
                      max=float(np.mean([t[1] for t in triples])),
                      sd=float(np.mean([t[2] for t in triples])))
        for year, triples in sorted(by_year.items())
    ]
    return ({s: np.asarray(v) for s, v in max_series.items()},
            {s: np.asarray(v) for s, v in mean_series.items()},
            summaries)


_RL_HEADER = ["site_id", "return_period", "rl_mean", "rl_max",
              "analogue_year", "analogue_sd"]


def write_return_level_sets(sets: list[ReturnLevelSet], path) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_RL_HEADER)
        for row in sets:
            writer.writerow([row.site_id, row.return_period,
                             _format_float(row.rl_mean),
                             _format_float(row.rl_max),
                             row.analogue_year,
                             _format_float(row.analogue_sd)])


def read_return_level_sets(path) -> list[ReturnLevelSet]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _RL_HEADER:
            raise ValueError(f"expected header {_RL_HEADER}, got {header}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(_RL_HEADER):
                raise ValueError(f"row {lineno}: expected "
                                 f"{len(_RL_HEADER)} columns")
            try:
                parsed = ReturnLevelSet(
                    site_id=row[0], return_period=int(row[1]),
                    rl_mean=float(row[2]), rl_max=float(row[3]),
                    analogue_year=int(row[4]), analogue_sd=float(row[5]))
            except ValueError as exc:
                raise ValueError(f"row {lineno}: {exc}") from None
            out.append(replace(parsed,
                               rl_inverted=parsed.rl_max < parsed.rl_mean))
        return out
