import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    from boosted_ukf.numerics import RngStream
    return RngStream(1234)


def random_spd(rng, n, scale=1.0):
    A = rng.normal((n, n))
    return scale * (A @ A.T + n * np.eye(n))


_CI_SUMMARIES: dict = {}


def ci_summary(sigma=1e-3, seed=0):
    """LRW -> WFM Gaussian summary at CI scale (n=500, 2000 epochs), memoized per session."""
    key = (sigma, seed)
    if key not in _CI_SUMMARIES:
        from boosted_ukf.experiment import preprocess
        from boosted_ukf.lrw import LrwConfig
        from boosted_ukf.numerics import RngStream
        from boosted_ukf.sensing import build_dataset
        from boosted_ukf.wfm import FlowTrainConfig

        ds = build_dataset(500, sigma, RngStream(seed))
        _CI_SUMMARIES[key] = preprocess(ds, LrwConfig(), FlowTrainConfig(epochs=2000), seed)[2]
    return _CI_SUMMARIES[key]


_WINDOWED: dict = {}


def windowed_errors(kind, seed, vs=None):
    """Final relative error (%) of one filter on the windowed regime at 400 s, memoized."""
    key = (kind, seed)
    if key not in _WINDOWED:
        from boosted_ukf.boosted import BoostedConfig
        from boosted_ukf.experiment import run_single

        tr = run_single(kind, "windowed", BoostedConfig(), seed, vs=vs, record_every=100000)
        _WINDOWED[key] = tr.rel_err_pct()
    return _WINDOWED[key]


CRITERIA: dict = {}


def record_criterion(key, ok, detail=""):
    """Store one acceptance line; several checks of one criterion AND together."""
    prev = CRITERIA.get(key)
    if prev is not None:
        ok = ok and prev[0]
        detail = f"{prev[1]}; {detail}" if detail else prev[1]
    CRITERIA[key] = (bool(ok), detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=str):
        ok, detail = CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
