import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from glaciermap.dataset import SynthSpec, synth_dataset  # noqa: E402
from glaciermap.model import ModelConfig, build_model  # noqa: E402
from glaciermap.training import TrainConfig, train  # noqa: E402


@pytest.fixture(scope="session")
def clean_tiles():
    """Ten noiseless 64 px tiles split 6/2/2."""
    return synth_dataset(10, seed=0, base=SynthSpec(size=64))


@pytest.fixture(scope="session")
def trained_toy(clean_tiles):
    """Toy model trained globally on the noiseless tiles, with its history."""
    model = build_model(ModelConfig.toy(seed=0))
    return train(model, clean_tiles, "global", TrainConfig.desk(seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, when that module ran."""
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name in mod.CRITERIA:
        if name in mod.RESULTS:
            ok, detail = mod.RESULTS[name]
            tr.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        else:
            tr.write_line(f"FAIL  {name}: not evaluated (error or deselected)")
