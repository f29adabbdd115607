import pytest

from deltacharger.dataio import generate_angle_dataset, generate_position_dataset


@pytest.fixture(scope="session")
def small_angle_dataset():
    """20 frames per angle class"""
    return generate_angle_dataset(seed=42, per_class=20)


@pytest.fixture(scope="session")
def small_position_dataset():
    """4 attempts per grid cell"""
    return generate_position_dataset(seed=7, attempts=4)
