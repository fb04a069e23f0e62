"""Shared fixtures: a default sim config, a small seeded scene, one demo."""

import pytest

from servograph.bank import MemoryBank, Scheme, segment
from servograph.scripted import scripted_demo
from servograph.simulator import ShapeKind, SimConfig, TaskKind, make_task, reset


@pytest.fixture(scope="session")
def sim_cfg():
    return SimConfig()


@pytest.fixture(scope="session")
def sorting_task(sim_cfg):
    return make_task(TaskKind.SHAPE_SORTING, ShapeKind.TRAPEZE, sim_cfg)


@pytest.fixture(scope="session")
def world(sorting_task, sim_cfg):
    return reset(sorting_task, seed=42, cfg=sim_cfg)


@pytest.fixture(scope="session")
def demo_traj(sorting_task, sim_cfg):
    return scripted_demo(sorting_task, seed=42, cfg=sim_cfg)


@pytest.fixture(scope="session")
def demo_bank(demo_traj):
    return MemoryBank(tuple(segment(demo_traj, Scheme.P3, "demo042")))
