import os
from importlib import resources

import numpy as np
import pytest

from pimsim.compiler import compile_network
from pimsim.config import load_config
from pimsim.engine import simulate
from pimsim.nn import generate_weights, load_network

DATA = resources.files("pimsim") / "data"
FIXTURES = ("mlp3", "tiny_cnn", "tiny_resnet", "tiny_vgg")
GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def net_path(name):
    return str(DATA / "networks" / f"{name}.json")


def cfg_path(name):
    return str(DATA / "configs" / f"{name}.json")


def program_path(name):
    return str(DATA / "programs" / f"{name}.asm")


def fixture_input(net, seed=1):
    return generate_weights(seed, 1, int(np.prod(net.input_shape))).reshape(-1)


def run_fixture(name, cfg, strategy="performance", seed=1, net=None):
    net = net or load_network(net_path(name))
    x = fixture_input(net, seed)
    compiled = compile_network(net, cfg, strategy)
    sim = simulate(compiled.program, cfg, gmem_init=x.tobytes())
    return net, x, compiled, sim


@pytest.fixture(scope="session")
def desk():
    return load_config(cfg_path("desk"))


@pytest.fixture(scope="session")
def chip64():
    return load_config(cfg_path("chip64"))
