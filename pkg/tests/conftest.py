import pytest
import torch

from concept_inversion.conditioning import base_vocabulary
from concept_inversion.denoiser import ArchConfig, ConditionalDenoiser
from concept_inversion.diffusion import init_table
from concept_inversion.schedule import make_schedule

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains or samples real models (minutes)")
    config.addinivalue_line("markers", "acceptance: acceptance criteria suite")


@pytest.fixture
def tiny_arch():
    return ArchConfig(image_size=8, channels=(8, 8), embed_dim=6, heads=2, groups=4)


def make_tiny_model(arch, seed=0, dtype=torch.float32, T=8):
    torch.manual_seed(seed)
    model = ConditionalDenoiser(arch, init_table(base_vocabulary(), arch.embed_dim, seed))
    # randomize every parameter so no branch is degenerate at init
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(0.3 * torch.randn(p.shape, generator=g))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    model.to(dtype)
    model.table.to(dtype)
    return model, make_schedule(T, "linear", 0.05, 0.3)


@pytest.fixture
def tiny_model(tiny_arch):
    return make_tiny_model(tiny_arch)


@pytest.fixture
def tiny_model64(tiny_arch):
    return make_tiny_model(tiny_arch, dtype=torch.float64)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one criterion line, print it, and fail the test if it did not hold."""

    def check(criterion: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
