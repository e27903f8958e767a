import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ensgan import ndtensor as nd
from ensgan.adversarial import TrainingData
from ensgan.corpus import generate_synthetic_corpus

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _fresh_tape():
    nd.clear_tape()
    yield
    nd.clear_tape()


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(3, n_pairs=400)


@pytest.fixture(scope="session")
def small_data(small_corpus):
    return TrainingData.from_corpus(small_corpus)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_ACCEPTANCE: dict = {}


class _Recorder:
    def __call__(self, key: str, passed: bool, detail: str) -> bool:
        _ACCEPTANCE[key] = (bool(passed), detail)
        print(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)


@pytest.fixture(scope="session")
def criterion():
    return _Recorder()


def _sort_key(key):
    head = key.rstrip("abcdefghijklmnopqrstuvwxyz")
    return int(head), key[len(head):]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=_sort_key):
        passed, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:>3}: {'PASS' if passed else 'FAIL'}  {detail}")
