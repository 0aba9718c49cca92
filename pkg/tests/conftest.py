import numpy as np
import pytest

from kgmd.network import Architecture, init_params


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: long-running training and convergence checks")


_ACCEPTANCE_RESULTS = []


def record_acceptance(name: str, passed: bool, detail: str = ""):
    _ACCEPTANCE_RESULTS.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, passed, detail in _ACCEPTANCE_RESULTS:
        status = "PASS" if passed else "FAIL"
        line = f"{status}  {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


def small_arch(rng=None, dim=1, n_outputs=2, with_regions=True,
               modes=2) -> Architecture:
    """A cheap architecture for randomized checks."""
    radii = (0.03, 0.05) if with_regions else ()
    counts = (2, 3) if with_regions else ()
    return Architecture(dim=dim, modes=modes, periods=(8.0,) * dim,
                        d_model=6, n_outputs=n_outputs, radii=radii,
                        counts=counts, encoder_widths=(6,), mixer_hidden=4,
                        head_widths=(6, 6))


def random_params(arch: Architecture, seed: int):
    return init_params(arch, np.random.default_rng(seed))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
