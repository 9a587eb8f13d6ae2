import importlib.util
import os
import sys

import numpy as np
import pytest
from hypothesis import settings

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")


def load_script(name):
    """Import a file from scripts/ as a module."""
    path = os.path.join(ROOT, "scripts", name + ".py")
    spec = importlib.util.spec_from_file_location(name, path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


@pytest.fixture(scope="session")
def digits_dir(tmp_path_factory):
    """scikit-learn 8x8 digits written as an MNIST-format IDX directory."""
    out = tmp_path_factory.mktemp("digits")
    load_script("make_digits_idx").write_digits(str(out), seed=0)
    return str(out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
