"""Unified landslide hazard modelling.

A joint deep regression predicts, per slope unit and year, the
probability that at least one landslide occurs and the scale of an
extended generalized Pareto (eGPD) distribution for the planimetric
area density when one does.  Around that core: eGPD return levels for
the precipitation trigger, hazard surfaces combining occurrence and
exceedance intensity, scenario differencing, and a probabilistic
evaluation suite (AUC, CRPS, PIT-based Q-Q).

Submodules (imported lazily so the command-line entry point can pin
thread counts before the numerical libraries initialize):

- ``egpd``: the size distribution, sampling, and maximum likelihood
- ``data``: schemas, CSV ingestion, splits, the synthetic generator
- ``network``: the block-structured two-head regression and its artifact
- ``training``: joint loss, backpropagation, Adam, the training loop
- ``frequency``: trigger-frequency eGPD fits and return levels
- ``hazard``: severity thresholds, intensity, hazard surfaces, scenarios
- ``evaluation``: AUC, CRPS, PIT-based Q-Q data
- ``cli``: the ``slopehazard`` command
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("egpd", "data", "network", "training", "frequency",
               "hazard", "evaluation", "cli")

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)
