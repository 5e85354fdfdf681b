import numpy as np
import pytest
import torch

from robust_reid.dataset import Sample, ReIDDataset, SyntheticSpec, make_synthetic
from robust_reid.model import ArchSpec, init_models

torch.set_num_threads(1)


def blank(identity, camera, h=8, w=4, value=0.5, pseudo=False):
    return Sample(np.full((3, h, w), value, np.float32), identity, camera, pseudo)


def dataset_from(cams_by_id: dict, split="train", meta=None, h=8, w=4) -> ReIDDataset:
    """Dataset of flat images; ``{identity: [camera, ...]}``."""
    rng = np.random.default_rng(0)
    samples = [Sample(rng.random((3, h, w)).astype(np.float32), i, c)
               for i, cams in cams_by_id.items() for c in cams]
    return ReIDDataset(samples, split, meta)


@pytest.fixture(scope="session")
def tiny_train():
    return make_synthetic(SyntheticSpec(num_ids=6, count=8, height=16, width=8), 0)


@pytest.fixture
def tiny_bundle(tiny_train):
    arch = ArchSpec(num_classes=tiny_train.num_classes, embed_dim=16, channels=(8, 16),
                    height=16, width=8)
    return init_models(arch, seed=0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
