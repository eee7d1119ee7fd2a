"""Shared fixtures: a small deterministic witness-bag dataset.

The full bundled benchmark dataset is built inside the acceptance tests;
unit tests use this smaller split to stay fast.
"""

from __future__ import annotations

import pytest

from mivc.data import (
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    spread_centers,
)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """600 bags, 3 classes, 16 dims: train/eval Dataset pair."""
    root = tmp_path_factory.mktemp("small-ds")
    spec = SyntheticSpec(
        n_bags=600,
        n_range=(2, 10),
        dim=16,
        class_centers=spread_centers(3, 16, scale=3.0, seed=101),
        witness_rate=0.25,
        noise_sigma=0.5,
        seed=7,
    )
    train_path, eval_path = generate_synthetic(spec, root)
    return load_dataset(train_path), load_dataset(eval_path)


@pytest.fixture(scope="session")
def small_manifests(tmp_path_factory):
    """Same generator recipe as ``small_dataset`` but exposing the paths."""
    root = tmp_path_factory.mktemp("small-ds-paths")
    spec = SyntheticSpec(
        n_bags=240,
        n_range=(2, 8),
        dim=8,
        class_centers=spread_centers(2, 8, scale=3.0, seed=11),
        witness_rate=0.3,
        noise_sigma=0.4,
        seed=5,
    )
    train_path, eval_path = generate_synthetic(spec, root)
    return train_path, eval_path
