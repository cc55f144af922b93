import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from prognosis.model import ModelConfig

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def micro_config(**over) -> ModelConfig:
    """8x8 image, C=8, one head, depth 1/1, K=2."""
    base = dict(image_height=8, image_width=8, cnn_channels=(8,), cnn_strides=(2,), context_width=8,
                embed_width=4, depth_D=1, depth_P=1, heads=1, ffn_width=8, K=2,
                n_prognosis_classes=5, dropout_rate=0.0, seed=0)
    base.update(over)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


MICRO_RUN = {
    "model.image_height": "8", "model.image_width": "8", "model.cnn_channels": "8",
    "model.cnn_strides": "2", "model.context_width": "8", "model.embed_width": "4",
    "model.depth_D": "1", "model.depth_P": "1", "model.heads": "1", "model.ffn_width": "8",
    "model.K": "2", "model.n_prognosis_classes": "5", "model.dropout_rate": "0.0",
    "data.n_samples": "48", "data.corpus_size": "8", "augment.enabled": "false",
    "train.epochs": "2", "train.batch_size": "16", "optim.lr": "0.001",
}


def micro_run_config(**over):
    """Tiny end-to-end RunConfig: synthetic 8x8 data, micro model, 2 epochs."""
    from prognosis.config import RunConfig
    items = dict(MICRO_RUN)
    items.update({k.replace("__", "."): str(v) for k, v in over.items()})
    return RunConfig().override(**items)


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
