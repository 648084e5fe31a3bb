import numpy as np
import pytest

from fasc.harness import PlantedSpec, generate_planted, planted_layers, write_fixture
from fasc.tensorio import KIND_ACTIVATION, KIND_GRADIENT, TensorBlock


def make_pair(x, g, layer_id=0):
    return (
        TensorBlock(layer_id=layer_id, kind=KIND_ACTIVATION, data=x),
        TensorBlock(layer_id=layer_id, kind=KIND_GRADIENT, data=g),
    )


def planted3_spec(seed=0, n=4096):
    """ d=3, variances (10, 5, 0.1), gradients concentrated on the last axis """
    return PlantedSpec(
        d=3,
        planted_axes=(2,),
        variances=(10.0, 5.0, 0.1),
        gradient_gain=100.0,
        noise=0.01,
        n=n,
        seed=seed,
    )


@pytest.fixture
def planted3():
    return generate_planted(planted3_spec())


@pytest.fixture
def identical_pair():
    _x = np.random.default_rng(5).standard_normal((512, 8)) * np.linspace(0.5, 3.0, 8)
    return make_pair(_x, _x)


@pytest.fixture
def ramp_manifest(tmp_path):
    """ 8-layer balanced planted fixture, d=16, gains 0.75 .. 3.0 """
    _layers = planted_layers(d=16, n=2048, seed=0)
    return write_fixture(_layers, str(tmp_path / "ramp"), tag="ramp")


@pytest.fixture
def gated_manifest(tmp_path):
    """ Two uncoupled layers followed by two strongly coupled ones, d=16 """
    _layers = planted_layers(d=16, n=4096, gains=[0.0, 0.0, 3.0, 3.0], seed=1)
    return write_fixture(_layers, str(tmp_path / "gated"), tag="gated")
