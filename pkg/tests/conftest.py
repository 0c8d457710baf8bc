import os
import time

import numpy as np
import pytest

from rmtdetect.detect import DetectionThreshold, attribute_and_classify, build_all_traces
from rmtdetect.les import chebyshev_t2
from rmtdetect.simulate import complex_scenario, simple_scenario, simulate

JOBS = os.cpu_count() or 1


def _run(cfg):
    tel = simulate(cfg)
    t0 = time.perf_counter()
    state, nodes = build_all_traces(tel.voltage, tel.power, 100, 1, chebyshev_t2(), jobs=JOBS)
    report = attribute_and_classify(
        state, nodes, cfg.tlp_library, DetectionThreshold(1.96), power=tel.power,
        voltage=tel.voltage, sensitivity=cfg.topology.voltage_sensitivity(), scenario=cfg.name,
    )
    return {"cfg": cfg, "tel": tel, "state": state, "nodes": nodes, "report": report,
            "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def simple_run():
    return _run(simple_scenario(0))


@pytest.fixture(scope="session")
def complex_run():
    return _run(complex_scenario(0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
