import numpy as np
import pytest

from e2esr.expr import skeletonize
from e2esr.generator import GeneratorConfig, SampleRejected, _sample_function, sample_inputs

TOY_GEN = GeneratorConfig(d_max=2, b_max=1, u_max=2)


def refine_suite(n=100, seed=10_000, cfg=TOY_GEN, n_test=200, perturb=0.1):
    """Seeded oracle problems: true skeleton, truth perturbed by up to ``perturb``.

    Train and held-out points come from the same input distribution.
    """
    out = []
    for i in range(n):
        rng = np.random.default_rng(seed + i)
        while True:
            expr, D, _, _ = _sample_function(cfg, rng)
            N = int(rng.integers(cfg.n_min_per_dim * D, cfg.n_max + 1))
            try:
                data = sample_inputs(expr, cfg, rng, dim=D, n_points=N + n_test)
                break
            except SampleRejected:
                continue
        skel, theta = skeletonize(expr)
        theta0 = theta * (1.0 + rng.uniform(-perturb, perturb, theta.size))
        out.append(dict(expr=expr, skel=skel, theta=theta, theta0=theta0, rng=rng,
                        x=data.x[:N], y=data.y[:N], xt=data.x[N:], yt=data.y[N:]))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        detail = item.user_properties and dict(item.user_properties).get("detail", "") or ""
        _CRITERIA[n] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {status}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
