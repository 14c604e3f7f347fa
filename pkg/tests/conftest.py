import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ecgra.model import ModelConfig
from ecgra.store import Dataset, EcgRecording, Sample, encode_labels

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_record(rec_id, length=100, fs=500.0, seed=0):
    rng = np.random.default_rng(seed)
    return EcgRecording(rec_id, fs, rng.standard_normal((12, length)))


def make_dataset(rows, fs=1.0, seed=0):
    """``rows``: list of (id, length in samples, "A|B" labels)."""
    rng = np.random.default_rng(seed)
    return Dataset([Sample(EcgRecording(i, fs, rng.standard_normal((12, n))), encode_labels(lab))
                    for i, n, lab in rows])


@pytest.fixture
def tiny_cfg():
    return ModelConfig(input_length=64, kernel_size=5, base_channels=4, channel_growth=4,
                       num_residual_modules=3, attention_hidden=6, seed=3)


@pytest.fixture
def reduced_cfg():
    return ModelConfig(input_length=1500, kernel_size=16, base_channels=8, channel_growth=8,
                       num_residual_modules=3, attention_hidden=16)


# one line per acceptance criterion, printed after the run whatever the outcome
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
