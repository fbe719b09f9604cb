import numpy as np
import pytest
from fastapi.testclient import TestClient

from sdxl_adapter.config import AdapterConfig
from sdxl_adapter.server import create_app


@pytest.fixture
def rng():
    return np.random.default_rng(77)


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app(AdapterConfig()))
