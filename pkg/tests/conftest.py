import pytest
import torch

from gidm.diffusion import Denoiser, make_noise_schedule, scaled_linear_schedule


def tiny_model(channels=1, T=10, width=1, depth=1, emb_dim=2, seed=0, dtype=torch.float64):
    """A denoiser small enough for finite-difference checks (62 parameters at the defaults)."""
    torch.manual_seed(seed)
    return Denoiser(channels=channels, width=width, depth=depth, emb_dim=emb_dim, T=T, levels=1).to(dtype)


@pytest.fixture
def sched10():
    return scaled_linear_schedule(10)


@pytest.fixture
def small_model():
    torch.manual_seed(0)
    return Denoiser(channels=1, width=8, depth=1, emb_dim=8, T=10, levels=1)


@pytest.fixture
def sched_standard():
    return make_noise_schedule(1000, 1e-4, 0.02)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}
ACCEPTANCE_NAMES: dict[int, str] = {}
ACCEPTANCE_STARTED: set[int] = set()


@pytest.fixture
def criterion(request):
    """``record(n, name, ok, detail)`` stores one acceptance line for the terminal summary."""
    ACCEPTANCE_STARTED.add(int(request.node.name.split("_")[2]))

    def record(n: int, name: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = ("PASS" if ok else "FAIL", name, detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_STARTED:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE_NAMES):
        if n in ACCEPTANCE:
            status, name, detail = ACCEPTANCE[n]
        elif n in ACCEPTANCE_STARTED:
            status, name, detail = "ERROR", ACCEPTANCE_NAMES[n], "did not complete; see the test log"
        else:
            status, name, detail = "NOT RUN", ACCEPTANCE_NAMES[n], "deselected"
        terminalreporter.write_line(f"[{status}] {n:2d}. {name}: {detail}")
