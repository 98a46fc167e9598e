import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

import pytest

_VERDICTS: dict[int, str] = {}


@pytest.fixture(scope="session")
def toy_build():
    """The three toy classifier variants, trained once per session."""
    from importlib import resources

    from radflip.tinynn.data import build_toy_splits
    from radflip.tinynn.pipeline import build_variants
    from radflip.tinynn.spec import load_model_spec
    from radflip.tinynn.train import TrainConfig

    splits = build_toy_splits("classification", 0)
    spec = load_model_spec(resources.files("radflip") / "configs" / "model_classifier.json")
    return build_variants(spec, splits["train"], splits["test"], TrainConfig(epochs=20),
                          TrainConfig(epochs=30)), splits


@pytest.fixture
def verdict():
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
