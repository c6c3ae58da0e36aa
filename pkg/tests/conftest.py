import pytest

from bvjump.pdaj import run

from instances import deconv_problem

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for acceptance criterion ``n``; returns ``ok``."""

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE][n] = line
        print(line)
        return ok

    return record


@pytest.fixture(scope="session")
def packaged():
    cfg, problem = deconv_problem()
    return cfg, problem


@pytest.fixture(scope="session")
def packaged_run(packaged):
    cfg, problem = packaged
    return run(problem.model, problem.loss, cfg.pdaj_config(), keep_states=True)


@pytest.fixture(scope="session")
def packaged_reference(packaged):
    cfg, problem = packaged
    return run(problem.model, problem.loss, cfg.pdaj_config(tol_phi=cfg.reference_tol, max_iter=10 * cfg.max_iter))
