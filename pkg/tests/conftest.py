import numpy as np
import pytest

from hitcd.vit import ModelConfig

# small enough for sub-second forward passes, large enough to exercise every decoder level
TOY = ModelConfig(image_size=32, patch_size=8, bands=3, embed_dim=16, depth=4, heads=2, fuse_stage=2,
                  he_grid=2, he_dim=4, decoder_tap_stages=(1, 2, 3, 4), fpn_dim=8)


@pytest.fixture
def toy_cfg():
    return TOY


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criterion number -> printed verdict line
ACCEPTANCE: dict = {}


def report(number: int, title: str, ok: bool, detail: str) -> str:
    line = f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
