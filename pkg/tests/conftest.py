import numpy as np
import pytest

from dcad.pipeline import BUNDLED_MODELS, CompiledModel, load_bundled

_cache: dict[str, CompiledModel] = {}


def get_model(name: str) -> CompiledModel:
    if name not in _cache:
        _cache[name] = load_bundled(name)
    return _cache[name]


@pytest.fixture(scope="session")
def box():
    return get_model("box")


@pytest.fixture(scope="session")
def bracket():
    return get_model("bracket")


@pytest.fixture(scope="session")
def coupled_cylinder():
    return get_model("coupled_cylinder")


@pytest.fixture(scope="session")
def dresser():
    return get_model("dresser")


@pytest.fixture(scope="session")
def two_boxes():
    return get_model("two_boxes")


@pytest.fixture(scope="session", params=BUNDLED_MODELS)
def any_model(request):
    return get_model(request.param)
