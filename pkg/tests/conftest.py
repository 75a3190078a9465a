import time
from dataclasses import dataclass
from pathlib import Path

import pytest
import torch

from zeropair.config import config_from_dict, load_config, load_data
from zeropair.metrics import evaluate_d2s
from zeropair.trainer import configure_determinism, networks_from_checkpoint, run_training


def tiny_config(mode="dcn", out_dir="runs/tiny", **sections):
    """32x32 toy run small enough for unit tests."""
    raw = {
        "model": {"image_size": 32, "base_channels": 4, "mode": mode},
        "loss": {"total_iters": 40, "batch_size": 2},
        "train": {"out_dir": str(out_dir), "seed": 0},
        "data": {"toy_size": 32, "n_rd": 8, "n_rs": 8, "n_test": 4},
    }
    for section, values in sections.items():
        raw[section].update(values)
    return config_from_dict(raw)


@pytest.fixture(autouse=True)
def _single_thread():
    configure_determinism(1)
    yield


@pytest.fixture
def tiny():
    return tiny_config


@pytest.fixture(scope="session")
def tiny_data():
    return load_data(tiny_config())


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.named_parameters()}


def changed(before, module):
    return {k for k, v in module.named_parameters() if not torch.equal(before[k], v)}


# -- shared toy-scale runs ----------------------------------------------------------

@dataclass
class ToyRun:
    cfg: object
    ckpt: Path
    log: Path
    cpu_seconds: float
    report: object


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """Train a committed toy config once per session, keyed by name, and score D->S."""
    cache = {}
    root = tmp_path_factory.mktemp("toy_runs")

    def run(name, config, **overrides):
        if name not in cache:
            cfg = load_config(config).with_overrides(
                train={"out_dir": str(root / name), **overrides.pop("train", {})}, **overrides)
            data = load_data(cfg)
            start = time.process_time()
            ckpt, log = run_training(cfg, data)
            cpu = time.process_time() - start
            nets, _, _ = networks_from_checkpoint(ckpt)
            report = evaluate_d2s(nets, data.test_depth, data.test_labels, data.palette)
            cache[name] = ToyRun(cfg, ckpt, log, cpu, report)
        return cache[name]

    return run


# -- acceptance summary -------------------------------------------------------------

ACCEPTANCE = []
CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
