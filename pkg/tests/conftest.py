import sys

import numpy as np
import pytest

from streamxl.config import ModelConfig
from streamxl.model import build_model


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layers=2, n_heads=2, d_model=8, d_ff=16, front_end="linear", feat_dim=6,
                n_classes=5, dropout=0.0, vgg_channels=(2, 2, 3, 3))
    base.update(kw)
    return ModelConfig(**base).validate()


def tiny_model(requires_grad=False, **kw):
    return build_model(tiny_config(**kw), requires_grad=requires_grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
