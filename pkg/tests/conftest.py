import numpy as np
import pytest

from latentfp import GeneratorSpec, build_generator
from latentfp.spectral import estimate_stats, select_basis


@pytest.fixture(scope="session")
def spec():
    return GeneratorSpec()


@pytest.fixture(scope="session")
def gen(spec):
    return build_generator(spec)


@pytest.fixture(scope="session")
def stats(gen):
    return estimate_stats(gen, 10_000, 1)


@pytest.fixture(scope="session")
def minor16(stats):
    return select_basis(stats, 48, 64)


@pytest.fixture(scope="session")
def major16(stats):
    return select_basis(stats, 0, 16)


@pytest.fixture(scope="session")
def affine_gen():
    """Affine g(w) = Aw + b with an anisotropic affine mapper."""
    from latentfp import Generator

    rng = np.random.default_rng(3)
    d_w, d_x = 12, 20
    A = rng.standard_normal((d_x, d_w)) / np.sqrt(d_w)
    b = rng.standard_normal(d_x)
    B = np.diag(np.geomspace(3.0, 0.3, d_w)) @ np.linalg.qr(rng.standard_normal((d_w, d_w)))[0]
    return Generator.from_affine(A, b, B, rng.standard_normal(d_w))


@pytest.fixture(scope="session")
def affine_stats(affine_gen):
    return estimate_stats(affine_gen, 5000, 2)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
