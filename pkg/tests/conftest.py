import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bimanual_aug.augment import GroundedDemo
from bimanual_aug.synthetic import get_task

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class Scenario:
    """A synthetic task with its demo and grounding, built once per session."""

    def __init__(self, name):
        self.task = get_task(name)
        self.demo = self.task.demo()
        self.objects = self.task.object_configuration()
        self.spec = self.task.spec
        self.plane = self.spec.symmetry_plane
        self.grounded = GroundedDemo.build(self.demo, self.task.template, self.objects, self.plane)
        self.timeline = self.grounded.timeline


@pytest.fixture(scope="session")
def pour():
    return Scenario("pour")


@pytest.fixture(scope="session")
def handover():
    return Scenario("handover")


@pytest.fixture(scope="session", params=["pour", "handover"])
def scenario(request):
    return Scenario(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
