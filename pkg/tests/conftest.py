import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest

from praclab import evaluation as ev
from praclab import scene as sc
from praclab import vlm

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("PRACLAB_TEST_CACHE", ROOT / ".test-cache"))
VICTIM_SEED = 0
VICTIM_STEPS = 3000

TINY = vlm.ModelConfig(d_model=16, n_heads=2, n_layers=2, d_ff=32, n_products=40, max_seq=256)


@pytest.fixture(scope="session")
def catalog():
    return sc.generate_catalog(0)


@pytest.fixture(scope="session")
def layout():
    return sc.GridLayout()


@pytest.fixture(scope="session")
def tiny_weights():
    return vlm.ModelWeights.init(TINY, 3)


@pytest.fixture(scope="session")
def small_weights():
    """Default-sized but untrained model."""
    return vlm.ModelWeights.init(vlm.ModelConfig(n_products=40), 5)


def trained_victim_path(catalog, layout) -> Path:
    """Train the default victim once and cache the checkpoint on disk."""
    mcfg = vlm.ModelConfig(n_products=len(catalog))
    tcfg = vlm.TrainConfig(steps=VICTIM_STEPS)
    key = json.dumps([asdict(mcfg), asdict(tcfg), VICTIM_SEED, catalog.seed], sort_keys=True)
    path = CACHE / f"victim_{hashlib.sha256(key.encode()).hexdigest()[:12]}.tvlm"
    if not path.exists():
        CACHE.mkdir(parents=True, exist_ok=True)
        res = vlm.train_selection_task(catalog, layout, mcfg, tcfg, seed=VICTIM_SEED)
        res.weights.save(path)
        (CACHE / (path.stem + ".acc")).write_text(f"{res.accuracy} {res.action_accuracy}\n")
    return path


@pytest.fixture(scope="session")
def victim(catalog, layout):
    return ev.Victim(vlm.ModelWeights.load(trained_victim_path(catalog, layout)), layout)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
