import numpy as np
import pytest

from mlkd.synthgen import DatasetSpec, generate, stack
from mlkd.trainer import teacher_config, train_teacher


@pytest.fixture(scope="session")
def default_data():
    """Default desk dataset as arrays: (images, y_full, val_images, val_labels)."""
    train, val = generate(DatasetSpec())
    images, y_full, _ = stack(train)
    val_images, val_labels, _ = stack(val)
    return images, y_full, val_images, val_labels


@pytest.fixture(scope="session")
def default_teacher(default_data):
    images, y_full, val_images, val_labels = default_data
    return train_teacher(teacher_config(), images, y_full, val_images, val_labels)


@pytest.fixture
def tiny_data():
    train, val = generate(DatasetSpec(n_train=64, n_val=32, seed=11))
    images, y_full, _ = stack(train)
    val_images, val_labels, _ = stack(val)
    return images, y_full, val_images, val_labels


def params_bytes(model):
    return b"".join(np.ascontiguousarray(p.data).tobytes() for p in model.parameters())
