import numpy as np
import pytest

from swimfluid.fluid import StaggeredGrid

ACCEPTANCE_LINES = {}


def record_acceptance(number, passed, detail):
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_grid():
    return StaggeredGrid((0.0, 0.0), (1.0, 1.0), (32, 32), 0.05)


def smooth_field(grid, rng, modes=3, amp=1.0):
    """Random smooth solenoidal-free velocity vanishing on the walls."""
    from swimfluid.fluid import VelocityField

    lo = np.array(grid.lo)
    ext = grid.extent
    coef = rng.standard_normal((grid.d, modes, modes))

    def f(x):
        s = (x - lo) / ext
        out = []
        for a in range(grid.d):
            acc = np.zeros(x.shape[:-1])
            for j in range(modes):
                for k in range(modes):
                    term = np.sin(np.pi * (j + 1) * s[..., 0]) * np.sin(np.pi * (k + 1) * s[..., 1])
                    if grid.d == 3:
                        term = term * np.sin(np.pi * s[..., 2])
                    acc += coef[a, j, k] * term / (1 + j * j + k * k)
            out.append(amp * acc)
        return np.stack(out, axis=-1)

    return VelocityField.from_function(grid, f)
