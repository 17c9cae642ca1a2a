import numpy as np
import pytest

from mmvqa.model import MMBert, ModelConfig
from mmvqa.vision import VisionConfig

TOY_VISION = VisionConfig(input_size=16, channels=(3, 4, 4, 6, 6), strides=(2, 2, 1, 2, 1), stem_kernel=3)


def toy_config(**kw):
    base = dict(vocab_size=20, num_answers=4, hidden=16, layers=2, heads=2, max_text_len=8, dropout=0.0, vision=TOY_VISION)
    base.update(kw)
    return ModelConfig(**base)


def toy_model(dtype=np.float64, seed=0, **kw):
    return MMBert(toy_config(**kw), seed=seed, dtype=dtype)


@pytest.fixture
def toy():
    return toy_model()


# One line per acceptance criterion, filled in by tests/test_acceptance.py and
# printed at the end of the run.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
