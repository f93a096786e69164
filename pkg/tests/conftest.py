from __future__ import annotations

import pytest
import torch

from sswl.experiment import simulate_phantoms

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """12 phantom pairs, 24x24, 10% dose: enough for split/training plumbing tests."""
    root = tmp_path_factory.mktemp("corpus24")
    simulate_phantoms(root, count=12, size=24, dose=0.1, seed=5)
    return root
