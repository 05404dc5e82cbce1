"""Shared fixtures: tiny configs, a planted-rule bundle and a gradient oracle."""
from typing import Callable

import numpy as np
import pytest

from common.bundle import Bundle
from common.graph import KnowledgeGraph
from common.models import SynthSpec, TrainConfig
from common.synth import synth_bundle
from engine.model import GSNPModel


def numerical_gradient(
    f: Callable[[], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x``, edited in place."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        original = x[idx]
        x[idx] = original + h
        up = f()
        x[idx] = original - h
        down = f()
        x[idx] = original
        grad[idx] = (up - down) / (2 * h)
    return grad


@pytest.fixture
def finite_difference():
    return numerical_gradient


@pytest.fixture
def tiny_config():
    return TrainConfig(
        d_edge=4,
        d_z=4,
        L=2,
        hop_k=2,
        lr=1e-2,
        max_epochs=1,
        episodes_per_epoch=4,
        eval_every=2,
        n_candidates=5,
        seed=0,
    )


@pytest.fixture
def synth_spec():
    return SynthSpec(
        n_entities=30,
        n_pairs=12,
        n_distractors=20,
        n_candidates=5,
        seed=3,
    )


@pytest.fixture
def bundle_dir(tmp_path, synth_spec):
    root = tmp_path / "bundle"
    synth_bundle(synth_spec, root)
    return root


@pytest.fixture
def bundle(bundle_dir):
    return Bundle.load(bundle_dir)


@pytest.fixture
def model(bundle, tiny_config):
    return GSNPModel(tiny_config, bundle.relation_vocabulary)


@pytest.fixture
def path_graph():
    """a - b - c - d along a single relation."""
    return KnowledgeGraph.from_named(
        [("a", "r", "b"), ("b", "r", "c"), ("c", "r", "d")]
    )
