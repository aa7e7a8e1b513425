"""Probabilistic and classification diagnostics.

AUC is the tie-adjusted Mann-Whitney statistic with an explicit ROC
curve from a threshold sweep.  CRPS integrates the squared CDF error

    crps(F, a) = integral_0^a F(x)^2 dx + integral_a^inf (1 - F(x))^2 dx

by adaptive quadrature split at the observation; for eGPD forecasts the
upper tail beyond the truncation point is bounded in closed form, so
the stated absolute tolerance is guaranteed.  Q-Q data pools the
heterogeneous per-record forecast distributions through the
probability integral transform: u_i = F_i(a_i) is uniform under a
perfect forecast, and both axes are mapped back to area-density units
through the pooled (mixture) quantile function, which preserves the
45-degree line.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.stats import rankdata

from .egpd import (
    EgpdParams,
    egpd_cdf,
    egpd_cdf_at_scales,
    egpd_quantile,
    egpd_survival,
)
from .network import RegressionModel

__all__ = [
    "RocCurve",
    "QqData",
    "CrpsError",
    "CrpsSummary",
    "auc",
    "crps",
    "egpd_crps",
    "dataset_crps",
    "qq_data",
    "pooled_quantile",
    "evaluation_report",
    "write_report",
    "write_roc_csv",
    "write_qq_csv",
]

_SURVIVAL_CUTOFF = 1e-10


class CrpsError(RuntimeError):
    """Quadrature failed or the integral diverges; carries diagnostics."""

    def __init__(self, message: str, *, achieved: float | None = None,
                 record_ids: list | None = None):
        super().__init__(message)
        self.achieved = achieved
        self.record_ids = record_ids or []


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def auc(scores, labels) -> RocCurve:
    """Mann-Whitney AUC (ties count one half) plus the ROC curve from a
    sweep over distinct score thresholds.  Needs both classes present."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be aligned 1-d arrays")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")

    ranks = rankdata(scores, method="average")
    value = (float(ranks[pos].sum()) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.argsort(-scores, kind="stable")
    sorted_pos = pos[order].astype(np.int64)
    cum_tp = np.cumsum(sorted_pos)
    cum_fp = np.cumsum(1 - sorted_pos)
    # keep one point per distinct score (the last index of each group)
    sorted_scores = scores[order]
    boundary = np.flatnonzero(np.diff(sorted_scores) != 0.0)
    keep = np.append(boundary, scores.size - 1)
    fpr = np.concatenate([[0.0], cum_fp[keep] / n_neg])
    tpr = np.concatenate([[0.0], cum_tp[keep] / n_pos])
    return RocCurve(fpr=fpr, tpr=tpr, auc=value)


def crps(cdf, observation: float, *, tol: float = 1e-7, upper: float | None = None) -> float:
    """CRPS of a callable CDF on (0, inf) against a nonnegative
    observation.

    The upper integral is truncated at ``upper`` if given, else at the
    first doubling point where the survival drops below 1e-10; past
    truncation the remainder is not accounted for (use egpd_crps for
    the guaranteed-tolerance eGPD path).
    """
    a = float(observation)
    if a < 0 or not math.isfinite(a):
        raise ValueError("observation must be finite and >= 0")
    if upper is None:
        upper = max(a, 1.0)
        for _ in range(2000):
            if 1.0 - cdf(upper) < _SURVIVAL_CUTOFF:
                break
            upper *= 2.0
        else:
            raise CrpsError("no truncation point found: survival stays above 1e-10")
    upper = max(float(upper), a)

    budget = tol / 2.0
    total = 0.0
    achieved = 0.0
    if a > 0:
        lower_val, lower_err = quad(lambda x: cdf(x) ** 2, 0.0, a,
                                    epsabs=budget, limit=200)
        total += lower_val
        achieved += lower_err
    if upper > a:
        upper_val, upper_err = quad(lambda x: (1.0 - cdf(x)) ** 2, a, upper,
                                    epsabs=budget, limit=200)
        total += upper_val
        achieved += upper_err
    if achieved > tol:
        raise CrpsError(f"quadrature tolerance not met: achieved {achieved:.3e}",
                        achieved=achieved)
    return total


def _octave_quad(f, lo: float, hi: float, scale: float, budget: float):
    """Integrate f over [lo, hi] in doubling panels anchored at scale.

    One panel per octave keeps the adaptive rule honest when the
    interval spans many orders of magnitude (heavy tails, observations
    far from the distribution's bulk); each panel is an easy smooth
    integral.  Returns (value, achieved error estimate)."""
    edges = [lo]
    edge = scale if lo <= 0 else max(scale, 2.0 * lo)
    while edge < hi:
        if edge > lo:
            edges.append(edge)
        edge *= 2.0
    edges.append(hi)
    per_panel = budget / (len(edges) - 1)
    total = 0.0
    achieved = 0.0
    for left, right in zip(edges[:-1], edges[1:]):
        val, err = quad(f, left, right, epsabs=per_panel, limit=200)
        total += val
        achieved += err
    return total, achieved


def _egpd_tail_bound(params: EgpdParams, T: float) -> float:
    """Closed-form bound on integral_T^inf (1 - F)^2 dx.

    1 - F = 1 - (1-G)^kappa <= max(kappa, 1) * G with
    G(x) = (1 + xi x / sigma)^(-1/xi), and G^2 integrates in closed
    form; finite only for xi < 2 (the integral itself diverges at
    xi >= 2).
    """
    kappa, sigma, xi = params.kappa, params.sigma, params.xi
    if xi >= 2.0:
        return math.inf
    factor = max(kappa, 1.0) ** 2 * sigma / (2.0 - xi)
    return factor * math.exp((1.0 - 2.0 / xi) * math.log1p(xi * T / sigma))


def egpd_crps(params: EgpdParams, observation: float, *, tol: float = 1e-7) -> float:
    """CRPS against an eGPD forecast with a guaranteed absolute
    tolerance: quadrature up to a point where the analytic tail bound is
    below tol/2, plus half that bound."""
    a = float(observation)
    if a < 0 or not math.isfinite(a):
        raise ValueError("observation must be finite and >= 0")
    if params.xi >= 2.0:
        raise CrpsError(f"CRPS diverges for xi >= 2 (got xi={params.xi})")

    T = max(a, egpd_quantile(1.0 - _SURVIVAL_CUTOFF, params))
    bound = _egpd_tail_bound(params, T)
    for _ in range(200):
        if bound <= tol / 2.0:
            break
        T *= 4.0
        bound = _egpd_tail_bound(params, T)
    else:
        raise CrpsError("tail bound did not shrink below tolerance")

    budget = tol / 4.0
    total = 0.0
    achieved = 0.0
    if a > 0:
        lower_val, lower_err = _octave_quad(
            lambda x: egpd_cdf(x, params) ** 2, 0.0, a, params.sigma, budget)
        total += lower_val
        achieved += lower_err
    if T > a:
        upper_val, upper_err = _octave_quad(
            lambda x: egpd_survival(x, params) ** 2, a, T, params.sigma, budget)
        total += upper_val
        achieved += upper_err
    if achieved > tol / 2.0:
        raise CrpsError(f"quadrature tolerance not met: achieved {achieved:.3e}",
                        achieved=achieved)
    return total + bound / 2.0


@dataclass(frozen=True)
class CrpsSummary:
    total: float
    mean: float | None  # None when there are no positive records
    count: int


def dataset_crps(model: RegressionModel, dataset, *, tol: float = 1e-7) -> CrpsSummary:
    """Sum and mean CRPS over the records with a landslide, each scored
    against its own eGPD(kappa, sigma_i, xi) forecast.  Sequential
    summation in record order keeps the result deterministic.  Failures
    are collected and raised together with their record ids."""
    labels = np.asarray(dataset.labels)
    pos = np.flatnonzero(labels == 1)
    if pos.size == 0:
        return CrpsSummary(total=0.0, mean=None, count=0)
    out = model.predict(dataset.X[pos])
    kappa, xi = model.kappa, model.xi
    total = 0.0
    failures: list = []
    for k, i in enumerate(pos):
        try:
            total += egpd_crps(EgpdParams(kappa, float(out.sigma[k]), xi),
                               float(dataset.areas[i]), tol=tol)
        except CrpsError as exc:
            failures.append((str(dataset.su_ids[i]), int(dataset.years[i]), str(exc)))
    if failures:
        raise CrpsError(
            f"CRPS failed for {len(failures)} record(s)",
            record_ids=[(su, yr) for su, yr, _ in failures])
    return CrpsSummary(total=total, mean=total / pos.size, count=int(pos.size))


def pooled_quantile(probs, kappa: float, sigmas: np.ndarray, xi: float) -> np.ndarray:
    """Quantile function of the equal-weight mixture of eGPD components
    sharing (kappa, xi) with per-record scales, by vectorized bisection."""
    probs = np.atleast_1d(np.asarray(probs, dtype=float))
    if np.any(probs <= 0.0) or np.any(probs >= 1.0):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    sigmas = np.asarray(sigmas, dtype=float)

    def mixture_cdf(x: np.ndarray) -> np.ndarray:
        # one row per probe point, one column per mixture component
        return egpd_cdf_at_scales(x[:, None], kappa, sigmas[None, :], xi).mean(axis=1)

    hi_params = EgpdParams(kappa, float(sigmas.max()), xi)
    hi = np.full(probs.shape, float(egpd_quantile(probs.max(), hi_params)) * (1 + 1e-9))
    lo = np.zeros_like(probs)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        below = mixture_cdf(mid) < probs
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class QqData:
    grid: np.ndarray                # probability levels
    pit_empirical: np.ndarray       # empirical quantiles of u_i at the grid
    empirical_quantile: np.ndarray  # pooled-quantile mapping of pit_empirical
    model_quantile: np.ndarray      # pooled-quantile mapping of the grid


def qq_data(model: RegressionModel, dataset, grid) -> QqData:
    """PIT-pooled Q-Q data for the positive records.

    u_i = F_i(a_i) is computed under each record's own forecast; the
    empirical quantiles of the u_i are compared with the uniform grid,
    and both sides pass through the pooled mixture quantile function so
    the plot reads in area-density units.  A perfect forecast puts the
    points on the 45-degree line in either coordinate system.
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if grid.size == 0 or np.any(grid <= 0.0) or np.any(grid >= 1.0):
        raise ValueError("grid must be nonempty with values strictly inside (0, 1)")
    labels = np.asarray(dataset.labels)
    pos = np.flatnonzero(labels == 1)
    if pos.size == 0:
        raise ValueError("no positive records for Q-Q data")
    out = model.predict(dataset.X[pos])
    kappa, xi = model.kappa, model.xi
    areas = np.asarray(dataset.areas, dtype=float)[pos]
    u = egpd_cdf_at_scales(areas, kappa, np.asarray(out.sigma, float), xi)
    pit_emp = np.quantile(u, grid)
    pit_emp = np.clip(pit_emp, np.min(u), np.max(u))  # inside (0,1) since a>0
    sigmas = np.asarray(out.sigma, dtype=float)
    return QqData(
        grid=grid,
        pit_empirical=pit_emp,
        empirical_quantile=pooled_quantile(pit_emp, kappa, sigmas, xi),
        model_quantile=pooled_quantile(grid, kappa, sigmas, xi),
    )


def evaluation_report(model: RegressionModel, dataset, *,
                      grid=None, crps_tol: float = 1e-7) -> dict:
    """Assemble the standard report: AUC with ROC points, CRPS sum and
    mean over positives, Q-Q points, and counts."""
    grid = np.linspace(0.01, 0.99, 99) if grid is None else np.asarray(grid, float)
    out = model.predict(dataset.X)
    labels = np.asarray(dataset.labels)
    roc = auc(out.p, labels)
    crps_summary = dataset_crps(model, dataset, tol=crps_tol)
    report = {
        "counts": {
            "records": int(labels.size),
            "positives": int(labels.sum()),
            "negatives": int(labels.size - labels.sum()),
        },
        "auc": roc.auc,
        "roc": {
            "fpr": [float(v) for v in roc.fpr],
            "tpr": [float(v) for v in roc.tpr],
        },
        "crps_total": crps_summary.total,
        "crps_mean": crps_summary.mean,
        "kappa": model.kappa,
        "xi": model.xi,
    }
    if crps_summary.count > 0:
        qq = qq_data(model, dataset, grid)
        report["qq"] = {
            "grid": [float(v) for v in qq.grid],
            "pit_empirical": [float(v) for v in qq.pit_empirical],
            "empirical_quantile": [float(v) for v in qq.empirical_quantile],
            "model_quantile": [float(v) for v in qq.model_quantile],
        }
    else:
        report["qq"] = None
    return report


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_roc_csv(roc: RocCurve, path) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fpr", "tpr"])
        for f, t in zip(roc.fpr, roc.tpr):
            writer.writerow([repr(float(f)), repr(float(t))])


def write_qq_csv(qq: QqData, path) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["grid", "pit_empirical", "empirical_quantile", "model_quantile"])
        for row in zip(qq.grid, qq.pit_empirical, qq.empirical_quantile, qq.model_quantile):
            writer.writerow([repr(float(v)) for v in row])
