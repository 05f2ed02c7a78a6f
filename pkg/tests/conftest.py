import numpy as np
import pytest

from fractalheat.geometry import build_preset
from fractalheat.verify import _generator, _kernel_op, _model, _table, _vertex_set


@pytest.fixture(scope="session")
def vicsek():
    return _model("vicsek")


@pytest.fixture(scope="session")
def gasket():
    return _model("gasket")


@pytest.fixture(scope="session")
def vs_cache():
    """(name, level, blowup) -> VertexSet, shared across the whole run."""
    return _vertex_set


@pytest.fixture(scope="session")
def kernel_cache():
    """(name, level, blowup, boundary) -> HeatKernel with cached spectra."""
    return _kernel_op


@pytest.fixture(scope="session")
def table_cache():
    return _table


@pytest.fixture(scope="session")
def generator_cache():
    return _generator
