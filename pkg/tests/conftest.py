import pytest
import torch

from latact import world
from latact.evaluation import TRAIN_SPAWN_REGION
from latact.seeding import derive_seed

torch.set_num_threads(1)


def make_episode(seed: int, skill: str = "pick", **kwargs):
    task = world.sample_task(seed, skill)
    return world.generate_episode(seed, task, spawn_region=TRAIN_SPAWN_REGION, **kwargs)


@pytest.fixture(scope="session")
def tiny_episodes():
    """A small mixed-skill corpus shared by model tests."""
    return [make_episode(derive_seed(7, "episode", i), world.SKILLS[i % 4])
            for i in range(12)]
