"""Acceptance checks, one test per criterion.

Each test carries a ``criterion`` marker; conftest prints one PASS/FAIL line
per criterion at the end of the session.  Criteria 1, 9, 10 and 11 share one
full default pipeline run (about half an hour on one CPU core).
"""

import csv
import json
import math
import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import hmrmerge.token_merge as tm
from hmrmerge.config import ExperimentConfig
from hmrmerge.diffusion import build_schedule, eps_from_v, forward_diffuse, hybrid_loss, recover_z0, sample, v_target
from hmrmerge.layer_merge import EclmConfig, eclm_search, merge_layer_params
from hmrmerge.metrics import accel_error, mpjpe, pa_mpjpe
from hmrmerge.model import Backbone, ModelConfig, load_backbone, predict_batch, zero_layers
from hmrmerge.pipeline import STAGES, Workspace, calibration_set, run_ablation, run_pipeline
from hmrmerge.pose import generate_clip, make_scene
from hmrmerge.token_merge import MergeSchedule, TokenState, bipartite_match, merge_pairs, plan_schedule, run_schedule
from test_diffusion import oracle
from test_metrics import brute_force_pa, random_rotation

criterion = pytest.mark.criterion


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    cfg = ExperimentConfig(output_dir=str(tmp_path_factory.mktemp("accept") / "run"))
    t0 = time.perf_counter()
    (result,) = run_pipeline(cfg)
    return cfg, result, time.perf_counter() - t0


# ---------------------------------------------------------------------------


@criterion(1, "ECLM error bound on a trained 12-layer backbone, 200 calibration frames")
@pytest.mark.slow
def test_eclm_bound(default_run):
    cfg, _, _ = default_run
    ws = Workspace.create(cfg)
    model = load_backbone(ws.model_path("backbone"))
    assert model.depth == 12
    frames, joints = calibration_set(ws)
    assert len(frames) == 200
    for tau in (0.5, 0.1):
        t0 = time.perf_counter()
        merged, rep = eclm_search(model, EclmConfig(tau=tau), frames, joints)
        seconds = time.perf_counter() - t0
        print(f"tau={tau}: ranges {rep.merged_ranges}, error {rep.base_error:.4f} -> {rep.final_error:.4f}, "
              f"{seconds:.1f}s")
        assert rep.final_error - rep.base_error < tau
        assert seconds < 60


@criterion(2, "three identity layers merge away at tau=1e-6 with outputs within 1e-9")
def test_eclm_identity_layers():
    model = zero_layers(Backbone(ModelConfig(seed=11)), [4, 5, 6])
    clips = [generate_clip(make_scene(900 + i), 20) for i in range(10)]
    frames = np.concatenate([c.features for c in clips])
    raw = predict_batch(model, frames)[1]
    truth = raw[:, :3 * model.cfg.n_joints].reshape(len(frames), -1, 3)
    merged, rep = eclm_search(model, EclmConfig(tau=1e-6), frames, truth)
    assert model.depth - merged.depth >= 2
    assert np.abs(predict_batch(merged, frames)[1] - raw).max() <= 1e-9


@criterion(3, "merge algebra: copies, pairs and the three-layer hand case")
@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 7, elements=st.floats(-1e3, 1e3)), st.integers(2, 8),
       arrays(np.float64, (2, 7), elements=st.floats(-1e3, 1e3)))
def test_merge_algebra(theta, k, ab):
    assert np.array_equal(merge_layer_params([theta] * k), theta)
    assert np.array_equal(merge_layer_params([ab[0], ab[1]]), ab[1])
    hand = merge_layer_params([np.array([1.0, 0.0]), np.array([2.0, 2.0]), np.array([0.0, 4.0])])
    assert hand.tolist() == [1.0, 6.0]


@criterion(4, "masked token merging: schedule [40, 40, 26] to 90 tokens, no person token in 1000 fuzzed masks")
def test_tome_schedule_and_mask_fuzz(monkeypatch):
    sched = MergeSchedule()
    assert plan_schedule(196, sched) == [40, 40, 26]
    rng = np.random.default_rng(2024)
    out, trace = run_schedule(TokenState.initial(rng.normal(size=(196, 8)), rng.random(196) < 0.2), sched)
    assert trace.counts == [196, 156, 116, 90] and len(out) == 90

    seen = []

    def watched(tokens, n, *a, **kw):
        pairs = bipartite_match(tokens, n, *a, **kw)
        seen.extend(bool(tokens.person_mask[i] or tokens.person_mask[j]) for i, j in pairs)
        return pairs

    monkeypatch.setattr(tm, "bipartite_match", watched)
    for _ in range(1000):
        person = rng.random(196) < rng.uniform(0.0, 0.5)
        out, _ = run_schedule(TokenState.initial(rng.normal(size=(196, 6)), person), sched)
        assert np.all(out.sizes[out.person_mask] == 1)
    assert seen and not any(seen)


@criterion(5, "provenance conservation under random merge sequences")
@settings(max_examples=200, deadline=None)
@given(st.integers(1, 98), st.integers(0, 2 ** 31 - 1), st.integers(1, 6))
def test_provenance_conservation(half, seed, rounds):
    rng = np.random.default_rng(seed)
    n = 2 * half
    tok = TokenState.initial(rng.normal(size=(n, 4)), rng.random(n) < rng.uniform(0, 0.6))
    for _ in range(rounds):
        if len(tok) % 2:
            break
        tok = merge_pairs(tok, bipartite_match(tok, int(rng.integers(0, len(tok) // 2 + 1))),
                          mode=str(rng.choice(["mean", "weighted"])))
        assert tok.sizes.sum() == n
        ids = sorted(i for p in tok.provenance for i in p)
        assert ids == list(range(n))
        assert [len(p) for p in tok.provenance] == tok.sizes.tolist()


@criterion(6, "zero-terminal schedule, v/eps/Z0 identities, one-step oracle recovery")
def test_diffusion_identities():
    s = build_schedule(T=1000, beta_start=0.00085, beta_end=0.012, kind="scaled_linear")
    assert math.sqrt(s.alpha_bars[-1]) <= 1e-12
    rng = np.random.default_rng(6)
    z0, eps = rng.normal(size=(2, 16, 4, 32))
    t = torch.as_tensor(rng.integers(1, 1001, 16))
    zt = forward_diffuse(s, z0, t, eps)
    v = v_target(s, z0, eps, t)
    assert np.abs(recover_z0(s, zt, v, t).numpy() - z0).max() <= 1e-10
    assert np.abs(eps_from_v(s, zt, v, t).numpy() - eps).max() <= 1e-10
    target = torch.as_tensor(z0)
    out = sample(oracle(s, target), s, None, steps=1, seed=0, shape=tuple(target.shape))
    assert ((out - target).norm() / target.norm()).item() <= 1e-5


@criterion(7, "hybrid loss: zero for the exact v, total equals the sum of its terms")
def test_hybrid_loss():
    s = build_schedule()
    rng = np.random.default_rng(7)
    z0, eps = rng.normal(size=(2, 32, 4, 32))
    t = torch.as_tensor(rng.integers(1, 1001, 32))
    zt = forward_diffuse(s, z0, t, eps)
    v = v_target(s, z0, eps, t)
    assert hybrid_loss(s, v, zt, t, z0, eps).total.item() == 0.0
    off = v + torch.as_tensor(rng.normal(size=v.shape))
    total, vt, et = hybrid_loss(s, off, zt, t, z0, eps, lam_v=1.0, lam_eps=1.0)
    assert total.item() == vt.item() + et.item()


@criterion(8, "metric properties: PA <= MPJPE, similarity invariance, accel offsets, brute-force PA oracle")
def test_metric_properties():
    rng = np.random.default_rng(8)
    pred, truth = rng.normal(size=(2, 10_000, 8, 3))
    per = [pa_mpjpe(p, t) for p, t in zip(pred, truth)]
    raw = np.linalg.norm(pred - truth, axis=-1).mean(-1)
    assert np.all(np.array(per) <= raw + 1e-12)
    assert pa_mpjpe(pred, truth) <= mpjpe(pred, truth)
    for _ in range(100):
        t = rng.normal(size=(8, 3))
        moved = rng.uniform(0.1, 10.0) * t @ random_rotation(rng).T + rng.normal(scale=5.0, size=3)
        assert pa_mpjpe(moved, t) <= 1e-9
    for _ in range(20):
        p, t = rng.normal(size=(2, 30, 8, 3))
        frames = np.arange(30.0)[:, None, None]
        shifted = p + rng.normal(size=3) + frames * rng.normal(size=3)
        assert abs(accel_error(shifted, t) - accel_error(p, t)) <= 1e-9
    for _ in range(3):
        t = rng.normal(size=(4, 3))
        p = 0.8 * t @ random_rotation(rng).T + 0.3 * rng.normal(size=(4, 3)) - 1.0
        assert abs(pa_mpjpe(p, t) - brute_force_pa(p, t, rng)) < 1e-3


@criterion(9, "VAE: held-out error < 25% of mean bone, best-so-far falls for 10 epochs, < 15 min")
@pytest.mark.slow
def test_vae_training(default_run):
    cfg, result, _ = default_run
    info = result.vae_info
    ws = Workspace.create(cfg)
    assert len(ws.split("train")) == 200 and cfg.train.vae_epochs <= 300
    held = info["heldout_mpjpe"]
    best = np.minimum.accumulate(held[:10])
    print(f"held-out {info['final_heldout']:.4f} vs 25% bone {0.25 * info['mean_bone']:.4f}, "
          f"{info['seconds']:.0f}s, first epochs {np.round(held[:10], 4).tolist()}")
    assert info["final_heldout"] < 0.25 * info["mean_bone"]
    assert len(best) == 10 and np.all(np.diff(best) < 0)
    assert info["seconds"] < 15 * 60


@criterion(10, "stage table trend: ECLM faster, ToMe faster and worse, diffusion recovers, >= 1.3x, < 30 min")
@pytest.mark.slow
def test_pipeline_trend(default_run):
    cfg, result, seconds = default_run
    ws = Workspace.create(cfg)
    rows = {r["stage"]: r for r in csv.DictReader((ws.run_dir / "stages.csv").open())}
    assert list(rows) == list(STAGES)
    print(result.table)
    print(f"pipeline {seconds:.0f}s")
    thr = {k: float(r["throughput"]) for k, r in rows.items()}
    err = {k: float(r["mpjpe"]) for k, r in rows.items()}
    assert thr["eclm"] > thr["baseline"]
    assert thr["eclm+tome"] > thr["eclm"]
    assert err["eclm+tome"] > err["eclm"]
    assert err["eclm+tome+diffusion"] < err["eclm+tome"]
    assert thr["eclm+tome"] >= 1.3 * thr["baseline"]
    assert seconds < 30 * 60


@criterion(11, "objective ablation: v and hybrid one-step error at least 2x below noise prediction")
@pytest.mark.slow
def test_objective_ablation(default_run):
    cfg, _, _ = default_run
    rows, table = run_ablation(cfg, "objective", timed=False)
    print(table)
    err = {r["objective"]: r["mpjpe"] for r in rows}
    assert 2 * err["v"] <= err["noise"]
    assert 2 * err["both"] <= err["noise"]
