import numpy as np
import pytest
import torch

from hmrmerge.model import Backbone, ModelConfig

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(depth=4, token_dim=8, heads=2, ff_dim=16, tokens_per_frame=16, input_dim=5,
                       feature_dim=6, queries=2, n_joints=4, n_shape=3, seed=3)


@pytest.fixture
def tiny_model(tiny_cfg):
    return Backbone(tiny_cfg)


def random_tokens(cfg, n, seed=0):
    return np.random.default_rng(seed).normal(size=(n, cfg.tokens_per_frame, cfg.input_dim))


def smoke_config(output_dir, **changes):
    """Seconds-scale end-to-end configuration (tiny model, data and budgets)."""
    from hmrmerge.config import ExperimentConfig
    from hmrmerge.diffusion import DenoiserConfig
    from hmrmerge.layer_merge import EclmConfig
    from hmrmerge.vae import VaeConfig
    from hmrmerge.config import BenchSpec, DataSpec, TrainSpec
    cfg = ExperimentConfig(
        model=ModelConfig(depth=3, token_dim=8, heads=2, ff_dim=16, feature_dim=8, queries=2),
        eclm=EclmConfig(tau=0.1, calibration_frames=12),
        vae=VaeConfig(frames=9, latent_tokens=1, latent_dim=8, layers=1, heads=2, ff_dim=16),
        denoiser=DenoiserConfig(layers=3, heads=2, latent_dim=8, ff_dim=16, cond_dim=8, latent_tokens=1,
                                frames=9),
        data=DataSpec(train_clips=6, test_clips=2, frames=9, backbone_clips=12, backbone_frames=2),
        train=TrainSpec(backbone_epochs=1, vae_epochs=2, denoiser_epochs=2),
        bench=BenchSpec(repetitions=2, warmup=1, clips=1),
        output_dir=str(output_dir))
    return cfg.replace(**changes) if changes else cfg


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion

_criteria: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, text = mark.args
    entry = _criteria.setdefault(num, [text, "PASS"])
    if rep.failed:
        entry[1] = "FAIL"
    elif rep.skipped and rep.when in ("setup", "call") and entry[1] == "PASS":
        entry[1] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        text, status = _criteria[num]
        terminalreporter.write_line(f"criterion {num:2d}: {status}  {text}")
