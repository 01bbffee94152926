from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("qacflow", max_examples=60, deadline=None)
settings.load_profile("qacflow")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-6))


SHAPES_CONFIG = dict(flow="edm", parameterization="denoiser", t_dist="lognormal", loss_weighting="edm",
                     d=8, hidden=256, depth=3, batch_size=64, steps=300, seed=0)


@pytest.fixture(scope="session")
def shapes_state():
    """Small conditional EDM model on 8x8 procedural shapes, shared by the editing tests."""
    from qacflow.datasets import ToySpec, generate
    from qacflow.training import TrainConfig, train
    data = generate(ToySpec("tiny-shapes", n=512, seed=0))
    return train(TrainConfig(**SHAPES_CONFIG), data), data


# acceptance reporting: criterion -> list of (part, passed, detail)
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def record(k: int, part: str, passed: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(k, []).append((part, bool(passed), detail))
    print(f"criterion {k} [{part}]: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[k]
        ok = all(p[1] for p in parts)
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}")
        for part, passed, detail in parts:
            terminalreporter.write_line(f"    {part}: {'pass' if passed else 'FAIL'}  {detail}")
