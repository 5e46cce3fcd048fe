import numpy as np
import pytest

from wavekws.network import Architecture

_criteria = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    outcome = _criteria.setdefault(number, [title, "PASS", []])
    if report.failed:
        outcome[1] = "FAIL"
    elif report.skipped and outcome[1] == "PASS" and report.when == "setup":
        outcome[1] = "SKIP"
    if report.when == "call":
        outcome[2] += [f"{k}={v}" for k, v in report.user_properties]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = (marker.args[0], marker.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, measured = _criteria[number]
        detail = f"  [{'; '.join(measured)}]" if measured else ""
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}{detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_arch(num_blocks=1, gating=True, **kw):
    base = dict(
        input_dim=3,
        initial_filter_size=2,
        num_blocks=num_blocks,
        block_filter_size=2,
        dilation_cycle=(1, 2),
        residual_channels=2,
        dilation_channels=3,
        skip_channels=3,
        head_hidden=4,
        gating_enabled=gating,
    )
    base.update(kw)
    return Architecture(**base)


def random_params(arch, rng, scale=0.7, dtype=np.float64):
    from wavekws.network import param_shapes

    return {k: (rng.standard_normal(s) * scale).astype(dtype) for k, s in param_shapes(arch).items()}
