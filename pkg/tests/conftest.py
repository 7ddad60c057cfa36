import os

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def record_criterion(cid: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {cid}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _no_output_root(monkeypatch):
    monkeypatch.delenv("IDP_OUTPUT_ROOT", raising=False)
    yield


def write_tsv(path, rows):
    path.write_text("".join("\t".join(map(str, r)) + "\n" for r in rows), encoding="utf-8")
    return path


@pytest.fixture
def tsv_writer():
    return write_tsv


@pytest.fixture(scope="session")
def s1_corpus():
    from idp.synth import S1, synthesize_corpus
    return synthesize_corpus(S1, 42)


@pytest.fixture(scope="session")
def s1_run(tmp_path_factory):
    """The default pipeline on S1 at seed 42; shared by the end-to-end tests."""
    from idp.config import load_config
    from idp.pipeline import run_all

    out = tmp_path_factory.mktemp("s1run")
    cfg = load_config(None, [f"run.outdir={out}"], seed=42)
    run_all(cfg)
    return cfg


def pytest_collection_modifyitems(config, items):
    if os.environ.get("IDP_SKIP_SLOW"):
        skip = pytest.mark.skip(reason="IDP_SKIP_SLOW set")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip)
