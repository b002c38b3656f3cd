import json
from pathlib import Path

import pytest

from regattn.config import toy_config
from regattn.data import DomainDataset, ToySpec, gen_toy, load_masks
from regattn.training import run_schedule

ACCEPTANCE_LINES = []


@pytest.fixture(autouse=True)
def _no_weight_cache(tmp_path, monkeypatch):
    # nothing in the test suite may depend on a pretrained archive being present
    monkeypatch.setenv("REGATTN_CACHE", str(tmp_path / "empty_cache"))


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """Shared benchmark: 200 train images per domain (seed 100), 50 test (seed 200)."""
    root = tmp_path_factory.mktemp("toy")
    gen_toy(ToySpec(count=200, seed=100), root / "train")
    gen_toy(ToySpec(count=50, seed=200), root / "test")
    return root


@pytest.fixture(scope="session")
def toy_test_set(toy_root):
    ds = DomainDataset(toy_root / "test" / "X", "X", 64)
    return ds.load_all(), load_masks(toy_root / "test" / "masks", ds.names())


class ToyRuns:
    """Full toy schedules, trained once per (seed, tag) and shared across tests."""

    def __init__(self, root, out):
        self.root = root
        self.out = out
        self.cache = {}

    def config(self, seed, tag="a"):
        return toy_config(self.root / "train" / "X", self.root / "train" / "Y",
                          output_dir=self.out / f"{tag}_{seed}", seed=seed)

    def get(self, seed, tag="a"):
        key = (seed, tag)
        if key not in self.cache:
            cfg = self.config(seed, tag)
            trainer = run_schedule(cfg)
            manifest = json.loads((Path(cfg["output_dir"]) / "manifest.json").read_text())
            self.cache[key] = (trainer, manifest, Path(cfg["output_dir"]))
        return self.cache[key]


@pytest.fixture(scope="session")
def toy_runs(toy_root, tmp_path_factory):
    return ToyRuns(toy_root, tmp_path_factory.mktemp("toy_runs"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
