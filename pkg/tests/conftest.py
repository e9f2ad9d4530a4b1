import shutil
from pathlib import Path

import pytest

from ecgres.synth import make_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory) -> Path:
    """Three short synthetic records in MIT-BIH layout."""
    d = tmp_path_factory.mktemp("corpus_small")
    make_corpus(d, 3, 120.0, seed=21)
    return d


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory) -> Path:
    d = tmp_path_factory.mktemp("corpus_mini")
    make_corpus(d, 3, 900.0, seed=5)
    return d


def write_config(path: Path, records: Path, out: Path, extra: str = "") -> Path:
    path.write_text(f'records_dir = "{records}"\noutput_dir = "{out}"\n{extra}')
    return path


@pytest.fixture(scope="session")
def mini_run(tmp_path_factory, mini_corpus):
    """A completed ``all --mini`` run: (config path, output dir)."""
    from ecgres.cli import main

    d = tmp_path_factory.mktemp("mini_run")
    cfg = write_config(d / "exp.toml", mini_corpus, d / "run")
    assert main(["all", "--config", str(cfg), "--mini"]) == 0
    return cfg, d / "run"


@pytest.fixture
def copy_run(tmp_path, mini_run):
    """A private copy of the mini run that a test may damage."""
    cfg, run = mini_run
    dst = tmp_path / "run"
    shutil.copytree(run, dst)
    new_cfg = write_config(tmp_path / "exp.toml", Path(cfg.read_text().split('"')[1]), dst)
    return new_cfg, dst


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
