import json
from pathlib import Path

import numpy as np
import pytest

from drvc.audio import build_manifest, extract_features
from drvc.config import AppConfig, AudioConfig, ModelConfig

from toy_runs import TOY_ROOT

DATA = Path(__file__).parent / "data"

# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    detail = getattr(item, "criterion_detail", "")
    status = "PASS" if report.passed else "FAIL"
    line = f"criterion {number} {status}: {title}" + (f" | {detail}" if detail else "")
    if number not in ACCEPTANCE_LINES or status == "FAIL":
        ACCEPTANCE_LINES[number] = line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])


@pytest.fixture
def criterion_detail(request):
    """Call with a short measurement summary; it is shown on the criterion's line."""

    def record(text: str) -> None:
        request.node.criterion_detail = text
        print(text)

    return record


@pytest.fixture(scope="session")
def oracle_values() -> dict:
    return json.loads((DATA / "oracle_values.json").read_text())


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(conv_channels=8, kernel_size=3, rnn_hidden=8, content_dim=4, style_dim=4,
                mlp_hidden=8, disc_channels=8)
    base.update(kw)
    return ModelConfig(**base)


def toy_model_config() -> ModelConfig:
    return ModelConfig(conv_channels=64, rnn_hidden=64, content_dim=32, style_dim=32, mlp_hidden=64,
                       disc_channels=64)


@pytest.fixture(scope="session")
def toy_manifest():
    return build_manifest(TOY_ROOT, 5)


@pytest.fixture(scope="session")
def toy_features(toy_manifest):
    return extract_features(toy_manifest, AudioConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _no_work_dir_env(monkeypatch):
    monkeypatch.delenv("DRVC_WORK_DIR", raising=False)


def small_app_config(work_dir, **training) -> AppConfig:
    cfg = AppConfig()
    cfg.work_dir = str(work_dir)
    cfg.audio.segment_frames = 32
    cfg.audio.eval_count_per_speaker = 5
    cfg.model = tiny_model_config()
    for k, v in training.items():
        setattr(cfg.training, k, v)
    return cfg
