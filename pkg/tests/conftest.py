import pytest

from pixpoint.config import load_config
from pixpoint.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Four synthetic scenes: three training pairs and one test pair."""
    out = tmp_path_factory.mktemp("tiny")
    generate(out, SynthConfig(n_scenes=4, seed=1))
    return out


@pytest.fixture
def quick_cfg():
    def make(**train):
        return load_config(overrides={"train": {"epochs": 2, **train}})
    return make


def pytest_terminal_summary(terminalreporter):
    lines = []
    for rep in terminalreporter.getreports("passed") + terminalreporter.getreports("failed"):
        if rep.when == "call":
            lines += [v for k, v in rep.user_properties if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
