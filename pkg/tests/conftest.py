import numpy as np
import pytest

FD_STEP = 1e-5
GRAD_RTOL = 1e-4
GRAD_FLOOR = 1e-7


def rel_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), GRAD_FLOOR)
    return np.abs(analytic - numeric) / denom


def numeric_grad(loss, array, step=FD_STEP, skip=None):
    """Central differences of ``loss()`` w.r.t. every entry of ``array`` (mutated in place).

    ``skip(idx)`` may return True to mark an entry as excluded (NaN in the result).
    """
    grad = np.full(array.shape, np.nan)
    for idx in np.ndindex(array.shape):
        old = array[idx]
        array[idx] = old + step
        plus = loss()
        excluded = skip is not None and skip()
        array[idx] = old - step
        minus = loss()
        excluded = excluded or (skip is not None and skip())
        array[idx] = old
        if not excluded:
            grad[idx] = (plus - minus) / (2 * step)
    return grad


def max_rel_error(analytic, numeric):
    ok = ~np.isnan(numeric)
    if not ok.any():
        return 0.0
    return float(rel_error(np.asarray(analytic)[ok], numeric[ok]).max())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail=""):
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {name}"
                            + (f" ({detail})" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
