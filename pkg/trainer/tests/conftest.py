"""Trainer test wiring: acceptance lines + the shared trained model."""

import time
from types import SimpleNamespace

import pytest

from keyedconv_trainer import TrainingConfig, export_manifest, train_tiny_model

_ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance():
    def record(name: str, ok: bool, detail: str, elapsed: float, budget: float) -> None:
        verdict = "PASS" if ok and elapsed < budget else "FAIL"
        line = f"{verdict}  {name}: {detail} ({elapsed:.1f}s, budget {budget:.0f}s)"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
        assert elapsed < budget, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_export(tmp_path_factory):
    """The real deal: default config, trained once per session, exported."""
    out = str(tmp_path_factory.mktemp("tiny3"))
    config = TrainingConfig()
    start = time.perf_counter()
    trained = train_tiny_model(config)
    train_seconds = time.perf_counter() - start
    manifest, blob = export_manifest(trained.net, out, training=config.to_dict())
    return SimpleNamespace(
        config=config,
        trained=trained,
        manifest=manifest,
        blob=blob,
        out_dir=out,
        train_seconds=train_seconds,
    )
