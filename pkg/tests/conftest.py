import json
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


SMALL_CONFIG = {
    "simulate": {"months": 1.0, "split_weights": [2, 1, 1], "transfer_months": 0.5},
    "models": {
        "svm": {"max_train_size": 800},
        "lstm": {"hidden_dim": 4, "seq_len": 8, "max_epochs": 2, "batch_size": 256,
                 "train_stride": 20, "val_stride": 10},
    },
    "tune": {"n_init": 2, "n_iters": 1},
}


@pytest.fixture(scope="session")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return str(path)
