import numpy as np
import pytest

from usjepa.model import EncoderConfig, ModelStack, PredictorConfig, TeacherMode

TINY_ENC = EncoderConfig(img_size=32, patch_size=8, embed_dim=16, depth=2, heads=2)
TINY_PRED = PredictorConfig(embed_dim=8, depth=2, heads=2, target_dim=16)


@pytest.fixture
def tiny_stack():
    return ModelStack(TINY_ENC, TINY_PRED, TeacherMode("static", "random"), seed=3)


@pytest.fixture
def tiny_frames():
    return np.random.default_rng(0).random((3, 32, 32)).astype(np.float32)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
