import numpy as np
import pytest

from metabnn import backend
from metabnn.data import LabeledDataset


@pytest.fixture(params=backend.available_backends())
def kernel_backend(request):
    """Run the test under every available kernel backend."""
    previous = backend.active_backend()
    backend.set_backend(request.param)
    yield request.param
    backend.set_backend(previous)


def synth_dataset(n, seed, n_pixels=784, n_classes=10, flip_prob=0.25,
                  name="synth"):
    """Learnable synthetic stand-in for the real data: each class is a
    random +-1 template with a fraction of pixels flipped per example."""
    rng = np.random.default_rng(seed)
    templates = rng.choice([-1.0, 1.0], size=(n_classes, n_pixels))
    labels = rng.integers(0, n_classes, size=n)
    flips = rng.random((n, n_pixels)) < flip_prob
    images = templates[labels] * np.where(flips, -1.0, 1.0)
    return LabeledDataset(images=images.astype(np.float32),
                          labels=labels.astype(np.int64), name=name)
