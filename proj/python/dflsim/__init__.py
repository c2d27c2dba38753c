"""Python access to the dflsim core."""

import json
import os

from ._dflsim import (
    ConfigError,
    DataError,
    Model,
    Topology,
    TopologyError,
    TrainingAbort,
    accumulation,
    aggregation,
    christofides,
    federated_average,
    generate_linesteer,
    load_topology,
)
from . import _dflsim

__all__ = [
    "ConfigError",
    "DataError",
    "Model",
    "Topology",
    "TopologyError",
    "TrainingAbort",
    "accumulation",
    "aggregation",
    "christofides",
    "federated_average",
    "generate_linesteer",
    "load_topology",
    "resolved_config",
    "run_experiment",
]


def run_experiment(config, base_dir=".", write=False):
    """Run one experiment. `config` is a dict or a path to a JSON file."""
    if isinstance(config, (str, os.PathLike)):
        base_dir = os.path.dirname(os.path.abspath(config))
        with open(config, encoding="utf-8") as fh:
            config = json.load(fh)
    return _dflsim.run_experiment(json.dumps(config), str(base_dir), write)


def resolved_config(config, base_dir="."):
    return json.loads(_dflsim.resolved_config(json.dumps(config), str(base_dir)))
