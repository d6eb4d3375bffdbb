import numpy as np
import pytest

from rehit import nn


@pytest.fixture
def verify_mode():
    with nn.numeric_mode("verify"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv2d(x, w, b=None, stride=1, dilation=1, padding=0, groups=1):
    """Direct summation; deliberately loop-based and independent of the kernel."""
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    ho = (h + 2 * ph - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pw - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, co, ho, wo))
    per_group_out = co // groups
    for b_ in range(n):
        for o in range(co):
            g = o // per_group_out
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cig):
                        cin = g * cig + ci
                        for ky in range(kh):
                            for kx in range(kw):
                                y = i * stride + ky * dilation - ph
                                xx = j * stride + kx * dilation - pw
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[b_, cin, y, xx] * w[o, ci, ky, kx]
                    out[b_, o, i, j] = acc + (0.0 if b is None else b[o])
    return out


ACCEPTANCE_LINES: dict[str, str] = {}


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    """Remember one pass/fail line; the terminal summary prints them in order."""
    line = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k[1:])):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
