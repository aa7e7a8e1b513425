"""Shared feed-forward regression with two heads.

Per record the network maps a standardized covariate vector through a
stack of identical blocks (dense layer, dropout in train mode, batch
normalization, ReLU) into two scalar heads: occurrence probability p
through a sigmoid, and the eGPD scale sigma through a ReLU floored at
SIGMA_FLOOR so the size likelihood stays defined.  Two global trainable
scalars, log_kappa and log_xi, carry the eGPD shapes; they are constant
over space and time but move with the same optimizer as the weights.

Batch normalization uses batch statistics in train mode (updating the
running statistics in place with exponential momentum) and the stored
running statistics in inference mode, which makes inference outputs
independent of batch composition.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import FeatureSchema

__all__ = [
    "SIGMA_FLOOR",
    "BN_EPSILON",
    "BlockParams",
    "NetworkParameters",
    "HeadOutputs",
    "NonFiniteActivationError",
    "init_parameters",
    "forward",
    "predict_record",
    "parameter_count",
    "expected_parameter_count",
    "trainable_paths",
    "get_param",
    "set_params",
    "RegressionModel",
    "save_model",
    "load_model",
]

SIGMA_FLOOR = 1e-6
BN_EPSILON = 1e-5


class NonFiniteActivationError(RuntimeError):
    """A forward pass produced a non-finite value; ``where`` names the block."""

    def __init__(self, where: str):
        super().__init__(f"non-finite activation in {where}")
        self.where = where


@dataclass
class BlockParams:
    W: np.ndarray          # (fan_in, width)
    b: np.ndarray          # (width,)
    bn_gamma: np.ndarray   # (width,)
    bn_beta: np.ndarray    # (width,)
    bn_run_mean: np.ndarray
    bn_run_var: np.ndarray
    dropout_rate: float


@dataclass
class NetworkParameters:
    blocks: list[BlockParams]
    head_p_w: np.ndarray   # (width,)
    head_p_b: float
    head_s_w: np.ndarray   # (width,)
    head_s_b: float
    log_kappa: float
    log_xi: float
    bn_momentum: float = 0.99

    @property
    def input_width(self) -> int:
        return int(self.blocks[0].W.shape[0])

    @property
    def width(self) -> int:
        return int(self.blocks[0].W.shape[1])

    @property
    def kappa(self) -> float:
        return math.exp(self.log_kappa)

    @property
    def xi(self) -> float:
        return math.exp(self.log_xi)

    def clone(self) -> "NetworkParameters":
        return copy.deepcopy(self)


class HeadOutputs(NamedTuple):
    p: np.ndarray
    sigma: np.ndarray


def init_parameters(input_width: int, seed, *, n_blocks: int = 16, width: int = 64,
                    dropout_rate: float = 0.2, bn_momentum: float = 0.99) -> NetworkParameters:
    """Scaled-Gaussian fan-in weights, zero biases, identity batch-norm,
    log_kappa = log_xi = log(0.5).  Deterministic per seed."""
    if input_width < 1:
        raise ValueError("input_width must be >= 1")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError("dropout_rate must be in [0, 1)")
    rng = np.random.default_rng(seed)
    blocks = []
    fan_in = input_width
    for _ in range(n_blocks):
        blocks.append(BlockParams(
            W=rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, width)),
            b=np.zeros(width),
            bn_gamma=np.ones(width),
            bn_beta=np.zeros(width),
            bn_run_mean=np.zeros(width),
            bn_run_var=np.ones(width),
            dropout_rate=dropout_rate,
        ))
        fan_in = width
    return NetworkParameters(
        blocks=blocks,
        head_p_w=rng.normal(0.0, math.sqrt(2.0 / width), size=width),
        head_p_b=0.0,
        head_s_w=rng.normal(0.0, math.sqrt(2.0 / width), size=width),
        head_s_b=0.0,
        log_kappa=math.log(0.5),
        log_xi=math.log(0.5),
        bn_momentum=bn_momentum,
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class ForwardCache(NamedTuple):
    """Everything backpropagation needs from a train-mode forward pass."""
    X: np.ndarray
    block_inputs: list[np.ndarray]      # input to each block's dense layer
    dropout_masks: list[np.ndarray | None]  # scaled masks (0 or 1/(1-rate))
    bn_xhat: list[np.ndarray]
    bn_inv_sd: list[np.ndarray]
    relu_mask: list[np.ndarray]
    hidden: np.ndarray                  # final block output
    z_p: np.ndarray
    z_sigma: np.ndarray
    p: np.ndarray
    sigma: np.ndarray


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteActivationError(where)


def forward_cached(X: np.ndarray, params: NetworkParameters, *, train: bool,
                   dropout_rng: np.random.Generator | None = None) -> ForwardCache:
    """Forward pass keeping intermediates.  In train mode, dropout is
    applied (needs ``dropout_rng`` when any rate > 0), batch statistics
    drive the normalization, and running statistics are updated in
    place."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("features must be a 2-d batch (records x width)")
    if X.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if X.shape[1] != params.input_width:
        raise ValueError(
            f"feature width {X.shape[1]} does not match network input width "
            f"{params.input_width}")
    _check_finite(X, "input batch")

    h = X
    block_inputs, masks, xhats, inv_sds, relus = [], [], [], [], []
    for index, block in enumerate(params.blocks):
        block_inputs.append(h)
        d = h @ block.W + block.b
        if train and block.dropout_rate > 0.0:
            if dropout_rng is None:
                raise ValueError("train-mode forward with dropout needs dropout_rng")
            keep = dropout_rng.random(d.shape) >= block.dropout_rate
            mask = keep / (1.0 - block.dropout_rate)
            d = d * mask
        else:
            mask = None
        masks.append(mask)
        if train:
            mean = d.mean(axis=0)
            var = d.var(axis=0)
            block.bn_run_mean *= params.bn_momentum
            block.bn_run_mean += (1.0 - params.bn_momentum) * mean
            block.bn_run_var *= params.bn_momentum
            block.bn_run_var += (1.0 - params.bn_momentum) * var
        else:
            mean = block.bn_run_mean
            var = block.bn_run_var
        inv_sd = 1.0 / np.sqrt(var + BN_EPSILON)
        xhat = (d - mean) * inv_sd
        y = block.bn_gamma * xhat + block.bn_beta
        h = np.maximum(y, 0.0)
        _check_finite(h, f"block {index}")
        xhats.append(xhat)
        inv_sds.append(inv_sd)
        relus.append(y > 0.0)

    z_p = h @ params.head_p_w + params.head_p_b
    z_sigma = h @ params.head_s_w + params.head_s_b
    _check_finite(z_p, "head_p")
    _check_finite(z_sigma, "head_sigma")
    p = _sigmoid(z_p)
    sigma = np.maximum(z_sigma, SIGMA_FLOOR)
    return ForwardCache(X, block_inputs, masks, xhats, inv_sds, relus,
                        h, z_p, z_sigma, p, sigma)


def forward(features, params: NetworkParameters, mode: str = "inference",
            dropout_seed=None) -> HeadOutputs:
    """Batch forward pass; ``mode`` is "train" or "inference".

    Train mode is deterministic for a fixed dropout_seed and mutates the
    running batch-norm statistics; inference mode is pure.
    """
    if mode not in ("train", "inference"):
        raise ValueError("mode must be 'train' or 'inference'")
    rng = None
    if mode == "train" and any(b.dropout_rate > 0 for b in params.blocks):
        if dropout_seed is None:
            raise ValueError("train mode with dropout requires dropout_seed")
        rng = np.random.default_rng(dropout_seed)
    cache = forward_cached(np.asarray(features, dtype=float),
                           params, train=(mode == "train"), dropout_rng=rng)
    return HeadOutputs(cache.p, cache.sigma)


def predict_record(features, params: NetworkParameters) -> HeadOutputs:
    """Single-record convenience: inference forward on a batch of one."""
    arr = np.asarray(features, dtype=float)
    if arr.ndim != 1:
        raise ValueError("predict_record expects a single feature vector")
    out = forward(arr[None, :], params, mode="inference")
    return HeadOutputs(float(out.p[0]), float(out.sigma[0]))


def expected_parameter_count(input_width: int, n_blocks: int, width: int) -> int:
    """Trainable scalars: dense weights/biases, batch-norm scale/shift,
    two width->1 heads, and the two global log-shape parameters."""
    count = 0
    fan_in = input_width
    for _ in range(n_blocks):
        count += fan_in * width + width  # dense
        count += 2 * width               # batch-norm gamma/beta
        fan_in = width
    count += 2 * (width + 1)             # heads
    count += 2                           # log_kappa, log_xi
    return count


def parameter_count(params: NetworkParameters) -> int:
    total = 0
    for path in trainable_paths(params):
        value = get_param(params, path)
        total += 1 if np.isscalar(value) else int(np.asarray(value).size)
    return total


def trainable_paths(params: NetworkParameters) -> list[str]:
    """Fixed order of every trainable parameter; gradient dicts and
    optimizer state are keyed by these paths."""
    paths = []
    for i in range(len(params.blocks)):
        paths += [f"blocks.{i}.W", f"blocks.{i}.b",
                  f"blocks.{i}.bn_gamma", f"blocks.{i}.bn_beta"]
    paths += ["head_p_w", "head_p_b", "head_s_w", "head_s_b", "log_kappa", "log_xi"]
    return paths


def get_param(params: NetworkParameters, path: str):
    if path.startswith("blocks."):
        _, index, name = path.split(".")
        return getattr(params.blocks[int(index)], name)
    return getattr(params, path)


def set_params(params: NetworkParameters, updates: dict) -> None:
    """Assign new values at the given paths, in place."""
    for path, value in updates.items():
        if path.startswith("blocks."):
            _, index, name = path.split(".")
            setattr(params.blocks[int(index)], name, np.asarray(value, dtype=float))
        elif path in ("head_p_b", "head_s_b", "log_kappa", "log_xi"):
            setattr(params, path, float(value))
        elif path in ("head_p_w", "head_s_w"):
            setattr(params, path, np.asarray(value, dtype=float))
        else:
            raise KeyError(f"unknown parameter path {path!r}")


@dataclass
class RegressionModel:
    """Trained network plus everything prediction needs: the feature
    schema and the training-split standardization statistics."""

    schema: FeatureSchema
    feature_mean: np.ndarray
    feature_sd: np.ndarray
    params: NetworkParameters
    schema_version: int = 1

    def standardize(self, X_raw: np.ndarray) -> np.ndarray:
        return (np.asarray(X_raw, dtype=float) - self.feature_mean) / self.feature_sd

    def predict(self, X_raw: np.ndarray) -> HeadOutputs:
        """Inference on raw (unstandardized) covariates."""
        return forward(self.standardize(X_raw), self.params, mode="inference")

    @property
    def kappa(self) -> float:
        return self.params.kappa

    @property
    def xi(self) -> float:
        return self.params.xi


def _array_out(arr: np.ndarray):
    return np.asarray(arr, dtype=float).tolist()


def model_to_json_obj(model: RegressionModel) -> dict:
    params = model.params
    return {
        "schema_version": model.schema_version,
        "feature_schema": model.schema.to_json_obj(),
        "standardization": {
            "mean": _array_out(model.feature_mean),
            "sd": _array_out(model.feature_sd),
        },
        "architecture": {
            "n_blocks": len(params.blocks),
            "width": params.width,
            "input_width": params.input_width,
            "bn_momentum": params.bn_momentum,
            "bn_epsilon": BN_EPSILON,
            "sigma_floor": SIGMA_FLOOR,
        },
        "blocks": [
            {
                "W": _array_out(b.W),  # row-major: one row per input unit
                "b": _array_out(b.b),
                "bn_gamma": _array_out(b.bn_gamma),
                "bn_beta": _array_out(b.bn_beta),
                "bn_run_mean": _array_out(b.bn_run_mean),
                "bn_run_var": _array_out(b.bn_run_var),
                "dropout_rate": b.dropout_rate,
            }
            for b in params.blocks
        ],
        "head_p": {"w": _array_out(params.head_p_w), "b": params.head_p_b},
        "head_sigma": {"w": _array_out(params.head_s_w), "b": params.head_s_b},
        "log_kappa": params.log_kappa,
        "log_xi": params.log_xi,
    }


def model_from_json_obj(obj: dict) -> RegressionModel:
    if obj.get("schema_version") != 1:
        raise ValueError(f"unsupported model schema_version {obj.get('schema_version')!r}")
    blocks = [
        BlockParams(
            W=np.asarray(b["W"], dtype=float),
            b=np.asarray(b["b"], dtype=float),
            bn_gamma=np.asarray(b["bn_gamma"], dtype=float),
            bn_beta=np.asarray(b["bn_beta"], dtype=float),
            bn_run_mean=np.asarray(b["bn_run_mean"], dtype=float),
            bn_run_var=np.asarray(b["bn_run_var"], dtype=float),
            dropout_rate=float(b["dropout_rate"]),
        )
        for b in obj["blocks"]
    ]
    params = NetworkParameters(
        blocks=blocks,
        head_p_w=np.asarray(obj["head_p"]["w"], dtype=float),
        head_p_b=float(obj["head_p"]["b"]),
        head_s_w=np.asarray(obj["head_sigma"]["w"], dtype=float),
        head_s_b=float(obj["head_sigma"]["b"]),
        log_kappa=float(obj["log_kappa"]),
        log_xi=float(obj["log_xi"]),
        bn_momentum=float(obj["architecture"]["bn_momentum"]),
    )
    return RegressionModel(
        schema=FeatureSchema.from_json_obj(obj["feature_schema"]),
        feature_mean=np.asarray(obj["standardization"]["mean"], dtype=float),
        feature_sd=np.asarray(obj["standardization"]["sd"], dtype=float),
        params=params,
    )


def save_model(model: RegressionModel, path) -> None:
    """JSON artifact; floats written as shortest exact decimals so the
    round trip is bit-identical and reruns are byte-identical."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(model_to_json_obj(model), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> RegressionModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_json_obj(json.load(fh))
