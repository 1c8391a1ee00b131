import sys

import numpy as np
import pytest

from tacofl import config


SMALL_TOML = """
rounds = 6
clients = 5
local_steps = 3
eta_l = 0.05
[model]
kind = "softmax"
[data]
dim = 8
num_classes = 4
n_per_class = 40
[data.partition]
scheme = "dirichlet"
phi = 0.5
[strategy]
name = "{strategy}"
"""


def small_cfg(strategy="fedavg", **overrides):
    cfg = config.parse_text(SMALL_TOML.format(strategy=strategy))
    return config.override(cfg, **overrides) if overrides else cfg


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
