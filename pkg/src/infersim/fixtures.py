"""Locate the packaged fixture data files.

The model catalog values are stand-ins: the shape (accuracy 57-94%, reference
latency 40-900 ms) mirrors common public image-classification models, but the
numbers are fixtures, not measurements.  The rate card mirrors public list
prices of the large-cloud era the simulator models.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path


def _data_path(name: str) -> Path:
    with resources.as_file(resources.files("infersim").joinpath("data", name)) as p:
        return Path(p)


def fixture_catalog_path() -> Path:
    return _data_path("models_fixture.json")


def default_rate_card_path() -> Path:
    return _data_path("rate_card_default.json")
