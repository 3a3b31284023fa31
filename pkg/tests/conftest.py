import numpy as np
import pytest

from growthcast.config import RunConfig
from growthcast.convnet import TrainHyper
from growthcast.growthsim import PhantomConfig, synthesize_case
from growthcast.preprocess import PatchConfig

SMALL_PHANTOM = PhantomConfig(dims=(36, 36, 36), seed_radius=3.5, margin=12)


def small_config(**kw) -> RunConfig:
    """A pipeline configuration that runs a fold in seconds."""
    base = RunConfig(
        phantom=SMALL_PHANTOM,
        patch=PatchConfig(sampling_halfwidth=12),
        train=TrainHyper(epochs=2, batch=64),
        max_train_patches=1500,
    )
    return base.with_overrides(**kw)


@pytest.fixture(scope="session")
def small_cohort():
    ss = np.random.SeedSequence(123).spawn(3)
    return [synthesize_case(SMALL_PHANTOM, np.random.default_rng(s), f"case{k:03d}") for k, s in enumerate(ss)]


@pytest.fixture(scope="session")
def small_loocv(small_cohort, tmp_path_factory):
    from growthcast.pipeline import run_loocv

    out = tmp_path_factory.mktemp("loocv")
    return run_loocv(small_cohort, small_config(), out), out


# one verdict line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
