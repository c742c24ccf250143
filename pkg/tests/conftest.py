import numpy as np
import pytest

from ebmix import kernels
from ebmix import simulation as sim
from ebmix.core import GeneSummaries

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, name: str, passed, detail: str) -> None:
    """Queue one summary line; ``passed`` is a bool or the string ``"SKIP"``."""
    status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
    ACCEPTANCE_LINES.append(f"[{status}] criterion {number:>2} {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)


def simulate_summaries(seed=0, G=2000, n=6, p1=0.05, psi=3.0, sigma_psi2=1.0, alpha=5.0,
                       beta=1 / 12, v0=None, tau=0.0, p2=0.0):
    """Draw two-group summaries directly from the model (no raw matrix)."""
    rng = np.random.default_rng(seed)
    s2 = 1 / rng.gamma(alpha, beta, G)
    k1, k2 = int(round(p1 * G)), int(round(p2 * G))
    lab = np.zeros(G, int)
    lab[:k1] = 1
    lab[k1:k1 + k2] = 2
    rng.shuffle(lab)
    centre = np.where(lab == 1, psi, np.where(lab == 2, -psi, 0.0))
    sd = np.sqrt(sigma_psi2) if v0 is None else np.sqrt(v0 * s2)
    eff = np.where(lab > 0, centre + sd * rng.standard_normal(G), 0.0)
    c = 2 / n
    d = tau + eff + rng.standard_normal(G) * np.sqrt(s2 * c)
    f = 2 * n - 2
    m = s2 * rng.chisquare(f, G) / f
    return GeneSummaries(d=d, m=m, f=f, n1=n, n2=n), lab


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    return request.param


@pytest.fixture(scope="session")
def lemma_data():
    return simulate_summaries(seed=123)


# Shared simulation studies (session scope: several tests read the same runs).
LOW_LEMMA = sim.SimScenario(G=2000, S=25, p1=0.05, psi=3.0, sigma_psi2=1.0, seed=7,
                            name="lemma-low", **sim.LOW_VARIABILITY)
HIGH_LEMMA = sim.SimScenario(G=2000, S=25, p1=0.05, psi=3.0, sigma_psi2=1.0, seed=11,
                             name="lemma-high", **sim.HIGH_VARIABILITY)
LIMMA_V1 = sim.SimScenario("LIMMA", G=2000, S=25, p1=0.05, psi=0.0, v0=1.0, seed=12,
                           name="limma-v0=1", **sim.LOW_VARIABILITY)


@pytest.fixture(scope="session")
def low_lemma_study():
    return sim.run_study(LOW_LEMMA, ("RR", "RG", "RF", "RH", "OR"), threads=1)


@pytest.fixture(scope="session")
def high_lemma_study():
    return sim.run_study(HIGH_LEMMA, sim.ALL_METHODS, threads=1)


@pytest.fixture(scope="session")
def limma_study():
    return sim.run_study(LIMMA_V1, ("RR", "RG", "OR"), threads=1)
