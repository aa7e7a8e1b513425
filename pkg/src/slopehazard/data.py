"""Dataset schemas, ingestion, splits, and the synthetic generator.

A dataset is one record per (slope unit, year): an ordered covariate
vector, a binary landslide indicator, and a planimetric area density in
[0, 1).  The indicator and the density are tied: a landslide occurred
in a cell-year if and only if its area density is positive, and rows
violating that are rejected at ingestion rather than repaired.

Feature roles are carried by the schema.  The three dynamic features
are the yearly precipitation summaries (reserved names ``precip_max``,
``precip_mean``, ``precip_sd``); everything else is static.  Features
named ``ndvi_*`` are the vegetation slots that hazard projection
replaces with per-site time averages.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .egpd import EgpdParams, egpd_quantile

__all__ = [
    "Feature",
    "FeatureSchema",
    "Dataset",
    "DatasetManifest",
    "DatasetError",
    "GeneratorSpec",
    "DYNAMIC_FEATURE_NAMES",
    "load_schema",
    "save_schema",
    "load_dataset",
    "save_dataset",
    "split",
    "simulate",
    "synthetic_schema",
    "quickstart_generator",
    "standardization_stats",
    "export_predictions",
]

# Dynamic slots, in the order hazard projection substitutes return levels.
DYNAMIC_FEATURE_NAMES = ("precip_max", "precip_mean", "precip_sd")

RESERVED_COLUMNS = ("su_id", "year", "landslide", "area_density")


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str  # "dynamic" | "static"
    encoding: str = "numeric"

    def __post_init__(self) -> None:
        if self.kind not in ("dynamic", "static"):
            raise ValueError(f"feature kind must be dynamic or static, got {self.kind!r}")
        if not self.name or self.name in RESERVED_COLUMNS:
            raise ValueError(f"invalid feature name {self.name!r}")


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]

    def __post_init__(self) -> None:
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("duplicate feature names in schema")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def width(self) -> int:
        return len(self.features)

    def index_of(self, name: str) -> int:
        for i, f in enumerate(self.features):
            if f.name == name:
                return i
        raise KeyError(f"feature {name!r} not in schema")

    def to_json_obj(self) -> list[dict]:
        return [{"name": f.name, "kind": f.kind, "encoding": f.encoding}
                for f in self.features]

    @classmethod
    def from_json_obj(cls, obj) -> "FeatureSchema":
        if not isinstance(obj, list):
            raise DatasetError("schema JSON must be a list of feature objects", [])
        feats = []
        for i, item in enumerate(obj):
            try:
                feats.append(Feature(name=item["name"], kind=item["kind"],
                                     encoding=item.get("encoding", "numeric")))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"schema entry {i} invalid: {exc}", []) from exc
        return cls(tuple(feats))


class DatasetError(ValueError):
    """Ingestion failure; ``report`` lists every (row, reason) found."""

    def __init__(self, message: str, report: list[tuple[int, str]]):
        detail = ""
        if report:
            shown = "; ".join(f"row {r}: {why}" for r, why in report[:10])
            more = f" (+{len(report) - 10} more)" if len(report) > 10 else ""
            detail = f" [{shown}{more}]"
        super().__init__(message + detail)
        self.report = report


@dataclass
class Dataset:
    schema: FeatureSchema
    su_ids: np.ndarray      # str array, shape (n,)
    years: np.ndarray       # int array, shape (n,)
    X: np.ndarray           # float array, shape (n, width)
    labels: np.ndarray      # int array in {0,1}, shape (n,)
    areas: np.ndarray       # float array in [0,1), shape (n,)

    @property
    def n(self) -> int:
        return int(self.labels.size)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.schema, self.su_ids[idx], self.years[idx],
                       self.X[idx], self.labels[idx], self.areas[idx])


@dataclass
class DatasetManifest:
    schema: FeatureSchema
    record_count: int
    year_min: int
    year_max: int
    site_count: int
    # per-feature (mean, sd), training split only; None before training
    standardization: tuple[np.ndarray, np.ndarray] | None = None

    def to_json_obj(self) -> dict:
        obj = {
            "schema": self.schema.to_json_obj(),
            "record_count": self.record_count,
            "year_min": self.year_min,
            "year_max": self.year_max,
            "site_count": self.site_count,
            "standardization": None,
        }
        if self.standardization is not None:
            mean, sd = self.standardization
            obj["standardization"] = {
                "mean": [float(v) for v in mean],
                "sd": [float(v) for v in sd],
            }
        return obj


def load_schema(path) -> FeatureSchema:
    with open(path, encoding="utf-8") as fh:
        return FeatureSchema.from_json_obj(json.load(fh))


def save_schema(schema: FeatureSchema, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(schema.to_json_obj(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_float(text: str, row: int, col: str, report: list) -> float:
    try:
        value = float(text)
    except ValueError:
        report.append((row, f"column {col!r}: not a number ({text!r})"))
        return math.nan
    if not math.isfinite(value):
        report.append((row, f"column {col!r}: not finite"))
    return value


def load_dataset(path, schema: FeatureSchema) -> tuple[Dataset, DatasetManifest]:
    """Read and validate a dataset CSV against the schema.

    Every violation in the file is collected (row number, reason)
    before the whole load is rejected with a DatasetError, so one pass
    reports all problems at once.
    """
    expected = ["su_id", "year", *schema.names, "landslide", "area_density"]
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file", []) from None
        if header != expected:
            raise DatasetError(
                f"{path}: header mismatch; expected {expected}, got {header}", [])
        rows = list(reader)

    report: list[tuple[int, str]] = []
    n = len(rows)
    width = schema.width
    su_ids = np.empty(n, dtype=object)
    years = np.zeros(n, dtype=np.int64)
    X = np.zeros((n, width))
    labels = np.zeros(n, dtype=np.int64)
    areas = np.zeros(n)
    seen: set[tuple[str, int]] = set()

    for i, row in enumerate(rows):
        rownum = i + 2  # header is line 1
        if len(row) != len(expected):
            report.append((rownum, f"expected {len(expected)} columns, got {len(row)}"))
            continue
        su = row[0]
        try:
            year = int(row[1])
        except ValueError:
            report.append((rownum, f"year not an integer ({row[1]!r})"))
            continue
        key = (su, year)
        if key in seen:
            report.append((rownum, f"duplicate (su_id, year) = {key}"))
        seen.add(key)
        su_ids[i] = su
        years[i] = year
        for j, name in enumerate(schema.names):
            X[i, j] = _parse_float(row[2 + j], rownum, name, report)
        label_text = row[2 + width]
        if label_text not in ("0", "1"):
            report.append((rownum, f"landslide must be 0 or 1, got {label_text!r}"))
            continue
        labels[i] = int(label_text)
        areas[i] = _parse_float(row[3 + width], rownum, "area_density", report)
        if math.isfinite(areas[i]):
            if not 0.0 <= areas[i] < 1.0:
                report.append((rownum, f"area_density outside [0,1): {areas[i]}"))
            elif labels[i] == 1 and areas[i] == 0.0:
                report.append((rownum, "occurrence-size inconsistency: landslide=1 with area_density=0"))
            elif labels[i] == 0 and areas[i] > 0.0:
                report.append((rownum, "occurrence-size inconsistency: landslide=0 with area_density>0"))

    if report:
        report.sort(key=lambda item: item[0])
        raise DatasetError(f"{path}: {len(report)} invalid row(s)", report)
    if n == 0:
        raise DatasetError(f"{path}: no data rows", [])

    dataset = Dataset(schema, su_ids.astype(str), years, X, labels, areas)
    manifest = DatasetManifest(
        schema=schema,
        record_count=n,
        year_min=int(years.min()),
        year_max=int(years.max()),
        site_count=int(np.unique(dataset.su_ids).size),
    )
    return dataset, manifest


def _format_float(value: float) -> str:
    # repr of a Python float is the shortest decimal that round-trips
    # bit-exactly, which also pins the serialized artifacts byte-for-byte.
    return repr(float(value))


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["su_id", "year", *dataset.schema.names, "landslide", "area_density"])
        for i in range(dataset.n):
            writer.writerow([
                dataset.su_ids[i],
                int(dataset.years[i]),
                *[_format_float(v) for v in dataset.X[i]],
                int(dataset.labels[i]),
                _format_float(dataset.areas[i]),
            ])


def split(dataset: Dataset, train_fraction: float = 0.70, seed=0) -> tuple[Dataset, Dataset]:
    """Seeded uniform record-level split into (train, test)."""
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must be in (0, 1]")
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.n)
    n_train = int(round(train_fraction * dataset.n))
    return dataset.subset(order[:n_train]), dataset.subset(order[n_train:])


def standardization_stats(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and population SD; constant features get SD 1."""
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return mean, sd


@dataclass(frozen=True)
class GeneratorSpec:
    """Known-truth generator: p = logistic(w.x + b), sigma = exp(v.x + c),
    fixed (kappa, xi), covariates independent normals."""

    schema: FeatureSchema
    w: np.ndarray
    b: float
    v: np.ndarray
    c: float
    kappa: float
    xi: float
    cov_loc: np.ndarray = field(default=None)  # type: ignore[assignment]
    cov_scale: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        width = self.schema.width
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))
        if self.w.shape != (width,) or self.v.shape != (width,):
            raise ValueError("w and v must match the schema width")
        loc = np.zeros(width) if self.cov_loc is None else np.asarray(self.cov_loc, float)
        scale = np.ones(width) if self.cov_scale is None else np.asarray(self.cov_scale, float)
        if loc.shape != (width,) or scale.shape != (width,):
            raise ValueError("covariate location/scale must match the schema width")
        object.__setattr__(self, "cov_loc", loc)
        object.__setattr__(self, "cov_scale", scale)
        EgpdParams(self.kappa, 1.0, self.xi)  # validates the shapes

    def to_json_obj(self) -> dict:
        return {
            "schema": self.schema.to_json_obj(),
            "w": [float(x) for x in self.w],
            "b": float(self.b),
            "v": [float(x) for x in self.v],
            "c": float(self.c),
            "kappa": float(self.kappa),
            "xi": float(self.xi),
            "cov_loc": [float(x) for x in self.cov_loc],
            "cov_scale": [float(x) for x in self.cov_scale],
        }

    @classmethod
    def from_json_obj(cls, obj) -> "GeneratorSpec":
        return cls(
            schema=FeatureSchema.from_json_obj(obj["schema"]),
            w=np.asarray(obj["w"], float), b=float(obj["b"]),
            v=np.asarray(obj["v"], float), c=float(obj["c"]),
            kappa=float(obj["kappa"]), xi=float(obj["xi"]),
            cov_loc=np.asarray(obj["cov_loc"], float),
            cov_scale=np.asarray(obj["cov_scale"], float),
        )


def synthetic_schema(n_extra_static: int = 3) -> FeatureSchema:
    """Canonical synthetic schema: 3 precipitation slots, 2 NDVI slots,
    and a few generic static covariates."""
    feats = [Feature(name, "dynamic") for name in DYNAMIC_FEATURE_NAMES]
    feats += [Feature("ndvi_mean", "static"), Feature("ndvi_sd", "static")]
    feats += [Feature(f"static_{i}", "static") for i in range(n_extra_static)]
    return FeatureSchema(tuple(feats))


def quickstart_generator(seed: int = 0, n_extra_static: int = 3,
                         kappa: float = 2.0, xi: float = 0.3) -> GeneratorSpec:
    """A reproducible generator with a strongly separable occurrence
    signal (Bayes AUC around 0.98) and mild covariate effects on the
    size scale.

    The size level keeps P(a >= 1) below 1e-3 so rejection barely
    distorts the eGPD tail, and the mild scale spread keeps the three
    distribution parameters recoverable from 20 000 records.
    """
    schema = synthetic_schema(n_extra_static)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(90,)))
    width = schema.width
    w = rng.normal(0.0, 2.5, width)
    v = rng.normal(0.0, 0.10, width)
    return GeneratorSpec(schema=schema, w=w, b=-2.5, v=v, c=math.log(0.02),
                         kappa=kappa, xi=xi)


def simulate(n_sites: int, n_years: int, truth: GeneratorSpec, seed=0) -> tuple[Dataset, dict]:
    """Draw a dataset from the generator; returns (dataset, truth record).

    Labels are Bernoulli(p(x)); positive sizes come from the truth eGPD
    truncated to (0, 1) by rejection.  Deterministic per seed.
    """
    if n_sites < 1 or n_years < 1:
        raise ValueError("n_sites and n_years must be >= 1")
    rng = np.random.default_rng(seed)
    n = n_sites * n_years
    width = truth.schema.width

    X = rng.normal(truth.cov_loc, truth.cov_scale, size=(n, width))
    logits = X @ truth.w + truth.b
    p = 1.0 / (1.0 + np.exp(-logits))
    labels = (rng.random(n) < p).astype(np.int64)
    sigma = np.exp(X @ truth.v + truth.c)

    areas = np.zeros(n)
    pos = np.flatnonzero(labels == 1)
    for i in pos:
        params = EgpdParams(truth.kappa, float(sigma[i]), truth.xi)
        for _ in range(1000):
            u = rng.random()
            if u == 0.0:
                continue
            draw = egpd_quantile(u, params)
            if draw < 1.0:
                areas[i] = draw
                break
        else:
            raise RuntimeError(
                f"rejection sampling failed for record {i}: "
                f"truncation mass above 1 too large (sigma={sigma[i]:.3g})")

    su_ids = np.repeat([f"s{k:04d}" for k in range(n_sites)], n_years).astype(str)
    years = np.tile(np.arange(2000, 2000 + n_years), n_sites)
    dataset = Dataset(truth.schema, su_ids, years, X, labels, areas)
    truth_record = dict(truth.to_json_obj(), seed_note="labels and sizes drawn with the passed seed")
    return dataset, truth_record


def export_predictions(dataset: Dataset, p: np.ndarray, sigma: np.ndarray, path,
                       hazards: dict[str, np.ndarray] | None = None) -> None:
    """One row per record: su_id, year, p, sigma, then one column per
    requested hazard threshold (insertion order preserved)."""
    hazards = hazards or {}
    for name, values in hazards.items():
        if len(values) != dataset.n:
            raise ValueError(f"hazard column {name!r} length mismatch")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["su_id", "year", "p", "sigma", *hazards.keys()])
        for i in range(dataset.n):
            writer.writerow([
                dataset.su_ids[i], int(dataset.years[i]),
                _format_float(p[i]), _format_float(sigma[i]),
                *[_format_float(values[i]) for values in hazards.values()],
            ])


def read_predictions(path) -> dict[str, list]:
    """Inverse of export_predictions; returns columns keyed by header name."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols: dict[str, list] = {name: [] for name in header}
        for row in reader:
            for name, cell in zip(header, row):
                cols[name].append(cell)
    for name in cols:
        if name == "su_id":
            continue
        if name == "year":
            cols[name] = [int(v) for v in cols[name]]
        else:
            cols[name] = [float(v) for v in cols[name]]
    return cols
