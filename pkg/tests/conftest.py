import re
import sys

import numpy as np
import pytest
import torch

from goelan.config import toy_config
from goelan.data import load_manifest, make_synthetic_dataset
from goelan.network import build_model

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    make_synthetic_dataset(root)
    return root


@pytest.fixture(scope="session")
def manifest(synthetic_root):
    return load_manifest(synthetic_root / "data.yaml")


@pytest.fixture
def toy_cfg():
    return toy_config(class_count=3)


@pytest.fixture
def toy_model(toy_cfg):
    torch.manual_seed(0)
    return build_model(toy_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = dict(getattr(module, "RESULTS", None) or {})
    # criteria that raised before recording a verdict
    for report in terminalreporter.stats.get("failed", []) + terminalreporter.stats.get("error", []):
        m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
        if m and int(m.group(1)) not in results:
            results[int(m.group(1))] = f"criterion {int(m.group(1)):>2} FAIL  {m.group(2)}: raised before a verdict"
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
