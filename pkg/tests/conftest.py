import numpy as np
import pytest

from ripzeno.models import MultispinModelParams, ToyModelParams, build_multispin_model, build_toy_model

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; call ``criterion(label, ok, detail)``."""

    def record(label: str, ok: bool, detail: str) -> bool:
        ok = bool(ok)
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        print(line)
        _ACCEPTANCE.append((label, ok, detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0].split()[1])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")


@pytest.fixture
def toy():
    return build_toy_model(ToyModelParams(omega=1.0, Omega=1.0, k_S=1.0, k_T=0.0))


@pytest.fixture
def multispin():
    return build_multispin_model(MultispinModelParams(hyperfine_a=1.0, zeeman_b=0.0, k_S=1.0, k_T=0.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_density(rng, d):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    rho = a @ a.conj().T
    return rho / np.trace(rho)
