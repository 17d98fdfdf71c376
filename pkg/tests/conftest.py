from __future__ import annotations

import sys

import numpy as np
import pytest

from dmoblend.datagen import gen_instance
from dmoblend.problem import THRESHOLD, Instance


def blank_instance(n_ct=2, n_pt=3, n=6, n_props=1, **overrides) -> Instance:
    """Roomy instance with nothing occupied and zero property gaps."""
    fields = dict(
        init_inventory=np.full(n_ct, 100.0),
        cap_min=np.zeros(n_ct),
        cap_max=np.full(n_ct, 200.0),
        flow_min=THRESHOLD * 10.0,
        flow_max=10.0,
        comp_occupied=np.zeros((n_ct, n), dtype=bool),
        prod_occupied=np.zeros((n_pt, n), dtype=bool),
        demand=np.zeros(n_pt),
        prop_delta=np.zeros((n_ct, n_pt, n_props)),
    )
    fields.update(overrides)
    return Instance(**fields)


@pytest.fixture
def blank():
    return blank_instance()


@pytest.fixture(scope="session")
def base_instance():
    return gen_instance(5, 3, 20, seed=0)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
