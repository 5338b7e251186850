import time

import pytest

from scai_lab import synth
from scai_lab.evaluation import run_ablation
from scai_lab.inference import AdaptConfig
from scai_lab.training import TrainConfig

VERDICTS = []


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)


class DefaultRun:
    """Default-config dataset, ablation ladder and trained joint system."""

    def __init__(self, root):
        self.root = root
        self.data_cfg = synth.DataConfig()
        self.train_cfg = TrainConfig()
        self.adapt_cfg = AdaptConfig()
        t = time.perf_counter()
        synth.make_dataset(self.data_cfg, root / "data")
        self.data_seconds = time.perf_counter() - t
        self.ds = synth.Dataset(root / "data")
        t = time.perf_counter()
        self.rows, self.nets = run_ablation(self.ds, self.train_cfg, self.adapt_cfg,
                                            out=root / "ablation")
        self.ablation_seconds = time.perf_counter() - t
        self.net = self.nets["joint"]
        self.test = self.ds.split("test")


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    return DefaultRun(tmp_path_factory.mktemp("default_run"))
