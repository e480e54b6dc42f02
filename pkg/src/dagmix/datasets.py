"""Bundled example fixtures.

The education model mirrors a 14-node transmission-of-education DAG
with two 3-category latent endowment nodes; the accompanying dataset is
simulated from hand-picked coefficients at a realistic sample size, so
the full pipeline (describe, fit, identify, effects) can be exercised
without any restricted survey data.
"""

from __future__ import annotations

from importlib import resources

from .em import Dataset
from .model import ModelSpec, load_model


def education_model_path() -> str:
    return str(resources.files("dagmix").joinpath("data/education_model.json"))


def education_data_path() -> str:
    return str(resources.files("dagmix").joinpath("data/education_sim.csv"))


def education_model() -> ModelSpec:
    return load_model(education_model_path())


def education_data() -> Dataset:
    return Dataset.from_csv(education_data_path(), education_model())
