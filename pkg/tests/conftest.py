import numpy as np
import pytest

from traceinfer.nn import ModelConfig, build_model
from traceinfer.simgen import SimConfig, generate_dataset

TINY_STACK = dict(n_channels=3, n_states=4, conv_stack=((4, 3), (4, 5)), gru_stack=(5,),
                  dense_hidden=6, rnn_full_cells=4, dtype="float64")


def tiny_config(variant="hybrid", **kw):
    return ModelConfig(**{**TINY_STACK, "variant": variant, **kw})


def tiny_batch(seed=0):
    """Batch of two length-12 sequences, the second padded after step 9."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 12, 3))
    mask = np.ones((2, 12), dtype=bool)
    mask[1, 9:] = False
    x[1, 9:] = 0.0
    labels = rng.integers(0, 4, size=(2, 12))
    labels[1, 9:] = 4
    return x, labels, mask


@pytest.fixture
def tiny_model():
    def make(variant="hybrid", seed=0, **kw):
        return build_model(tiny_config(variant, **kw), seed=seed)
    return make


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(SimConfig(count=8, seed=3))


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    generate_dataset(SimConfig(count=4, seed=5), out)
    return out


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Log one acceptance line (printed again in the terminal summary)."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
