import re

import numpy as np
import pytest

from cellnca.model import NcaConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_params(config, rng, dtype=np.float64, scale=0.3):
    """Parameters with every group nonzero (unlike init_params' zero update head)."""
    p = init_params(config, rng, dtype=dtype)
    for name, value in p.as_dict().items():
        value[...] = rng.normal(0.0, scale, value.shape)
    return p


@pytest.fixture
def tiny_config():
    return NcaConfig(channels=8, steps=3, update_hidden=8, classifier_hidden=6, num_classes=3)


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            match = re.search(r"test_criterion_(\d+)_", rep.nodeid)
            if match is None:
                continue
            crit = props.get("criterion", int(match.group(1)))
            props.setdefault("detail", f"did not complete ({rep.when} phase)")
            ok = rep.passed and rows.get(crit, (True,))[0]
            rows[crit] = (ok, props.get("detail", ""))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(rows):
        ok, detail = rows[crit]
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}  {detail}")
