import numpy as np
import pytest
import torch.nn as nn

from im2im_adv.core import DatasetSpec, ImageBuffer, make_synthetic_dataset
from im2im_adv.models import Im2ImModel, PatchDiscriminator, ToyClassifier, TrainConfig, train_classifier, train_im2im


@pytest.fixture(scope="session")
def paired_data():
    return make_synthetic_dataset(DatasetSpec(n=96, classes=4, seed=0))


@pytest.fixture(scope="session")
def split(paired_data):
    return paired_data.split(32)


@pytest.fixture(scope="session")
def trained_model(split):
    train, _ = split
    return train_im2im(train, TrainConfig(epochs=40, seed=0))


@pytest.fixture(scope="session")
def classifier(split):
    train, _ = split
    return train_classifier(train, TrainConfig(epochs=40, seed=0))


@pytest.fixture(scope="session")
def small_data():
    return make_synthetic_dataset(DatasetSpec(n=12, height=16, width=16, classes=3, seed=3))


class _Identity(nn.Module):
    def forward(self, x):
        return x


def identity_model(shape=(8, 8, 3)):
    """Im2ImModel whose generator is the identity map."""
    return Im2ImModel(_Identity(), PatchDiscriminator(2 * shape[2], 8), tuple(shape), True, {"epochs": 0})


class _Linear(nn.Module):
    """Two logits: [0, w.x + b]."""

    def __init__(self, w, b):
        super().__init__()
        import torch

        self.w = nn.Parameter(torch.as_tensor(np.asarray(w).transpose(2, 0, 1)[None], dtype=torch.float32))
        self.b = nn.Parameter(torch.tensor(float(b)))

    def forward(self, x):
        import torch

        s = (x * self.w.to(x.dtype)).flatten(1).sum(1) + self.b.to(x.dtype)
        return torch.stack([torch.zeros_like(s), s], dim=1)


def linear_classifier(w, b):
    return ToyClassifier(_Linear(w, b), 2, tuple(np.shape(w)), True)


def rand_image(rng, h=8, w=8, c=3):
    return ImageBuffer(rng.random((h, w, c)))


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
