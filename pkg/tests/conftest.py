import numpy as np
import pytest

from realitygap.adaptation import AdaptationConfig, TrainingCorpus, train_initial
from realitygap.harness import ExperimentPlan, pretrain_shared_rom
from realitygap.truss import NoiseSpec, apply_noise, pratt_truss, sample_contexts, solve_many


@pytest.fixture(scope="session")
def plan():
    return ExperimentPlan()


@pytest.fixture(scope="session")
def shared_rom(plan):
    """Surrogate over the full simulator ranges, shared by all slow tests."""
    return pretrain_shared_rom(plan)


@pytest.fixture(scope="session")
def small_corpus(plan):
    sim = pratt_truss(ranges=plan.ranges)
    rng = np.random.default_rng(5)
    contexts = sample_contexts(plan.design_ranges, rng, 1500)
    x = solve_many(sim, contexts)
    noise = NoiseSpec(rng_seed=5)
    target = np.stack([apply_noise(y, noise, t) for t, y in enumerate(x[:300])])
    return TrainingCorpus.from_raw(x, contexts, target, plan.ranges)


@pytest.fixture(scope="session")
def trained_model(small_corpus, shared_rom):
    return train_initial(small_corpus, shared_rom, AdaptationConfig(epochs=30, seed=3))


ACCEPTANCE: dict = {}


@pytest.fixture
def record_criterion():
    """Store one acceptance outcome; the summary is printed at session end."""
    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (passed, detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
