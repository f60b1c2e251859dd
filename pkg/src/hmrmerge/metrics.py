"""Pose-estimation metrics and the throughput harness.

Errors are in the skeleton's length units.  Acceleration uses second finite
differences (units per frame^2).
"""

from __future__ import annotations

import json
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .pose import MotionClip, PoseFrame


class MetricError(ValueError):
    pass


def _joints(x) -> np.ndarray:
    if isinstance(x, PoseFrame):
        return x.joints
    if isinstance(x, MotionClip):
        return x.joints
    return np.asarray(x, dtype=np.float64)


def joint_errors(pred, truth) -> np.ndarray:
    p, t = _joints(pred), _joints(truth)
    if p.shape != t.shape:
        raise MetricError(f"joint arrays differ in shape: {p.shape} vs {t.shape}")
    return np.linalg.norm(p - t, axis=-1)


def mpjpe(pred, truth) -> float:
    """Mean Euclidean joint error; accepts frames, clips or (..., J, 3) arrays."""
    return float(joint_errors(pred, truth).mean())


def procrustes_align(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Similarity transform (rotation, uniform scale, translation) of ``pred``
    that best matches ``truth`` in the least-squares sense (Umeyama)."""
    mu_p, mu_t = pred.mean(0), truth.mean(0)
    p0, t0 = pred - mu_p, truth - mu_t
    var_p = (p0 ** 2).sum()
    if var_p < 1e-24 or (t0 ** 2).sum() < 1e-24:
        raise MetricError("degenerate point set: all points coincide")
    u, s, vt = np.linalg.svd(p0.T @ t0)
    d = np.sign(np.linalg.det(u @ vt))
    fix = np.diag([1.0, 1.0, d])
    rot = u @ fix @ vt  # row-vector convention: p0 @ rot
    scale = (s * np.diag(fix)).sum() / var_p
    return scale * p0 @ rot + mu_t


def pa_mpjpe(pred, truth) -> float:
    p, t = _joints(pred), _joints(truth)
    if p.shape != t.shape:
        raise MetricError(f"joint arrays differ in shape: {p.shape} vs {t.shape}")
    if p.ndim == 2:
        return mpjpe(procrustes_align(p, t), t)
    flat_p, flat_t = p.reshape(-1, *p.shape[-2:]), t.reshape(-1, *t.shape[-2:])
    return float(np.mean([mpjpe(procrustes_align(a, b), b) for a, b in zip(flat_p, flat_t)]))


@dataclass(frozen=True)
class SkinSpec:
    """Surface points as fixed convex combinations of joints, (P, J) weights."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or np.any(w < -1e-12) or np.any(np.abs(w.sum(1) - 1) > 1e-9):
            raise MetricError("skin weights must be rows of convex combinations")
        object.__setattr__(self, "weights", w)

    @classmethod
    def identity(cls, n_joints: int) -> "SkinSpec":
        return cls(np.eye(n_joints))

    @classmethod
    def segments(cls, parents: Sequence[int], samples: Sequence[float] = (0.0, 0.25, 0.5, 0.75)) -> "SkinSpec":
        """Points spread along every parent->child segment (plus each child tip)."""
        n = len(parents)
        rows = []
        for child in range(1, n):
            for s in list(samples) + [1.0]:
                w = np.zeros(n)
                w[parents[child]] += 1.0 - s
                w[child] += s
                rows.append(w)
        return cls(np.unique(np.round(np.array(rows), 12), axis=0))


def pve_analog(pred_clip, truth_clip, skin: SkinSpec) -> float:
    p, t = _joints(pred_clip), _joints(truth_clip)
    if p.shape != t.shape:
        raise MetricError(f"joint arrays differ in shape: {p.shape} vs {t.shape}")
    if skin.weights.shape[1] != p.shape[-2]:
        raise MetricError(f"skin references {skin.weights.shape[1]} joints, pose has {p.shape[-2]}")
    sp = np.einsum("pj,...jc->...pc", skin.weights, p)
    st = np.einsum("pj,...jc->...pc", skin.weights, t)
    return float(np.linalg.norm(sp - st, axis=-1).mean())


def second_difference(x: np.ndarray) -> np.ndarray:
    return x[2:] - 2.0 * x[1:-1] + x[:-2]


def accel_error(pred_clip, truth_clip, raw_jitter: bool = False) -> float:
    """Mean norm of the difference of second differences over interior frames.

    With ``raw_jitter`` the prediction's own acceleration magnitude is
    reported instead (no ground truth involved).
    """
    p = _joints(pred_clip)
    if len(p) < 3:
        raise MetricError("acceleration needs at least 3 frames")
    if raw_jitter:
        return float(np.linalg.norm(second_difference(p), axis=-1).mean())
    t = _joints(truth_clip)
    if p.shape != t.shape:
        raise MetricError(f"joint arrays differ in shape: {p.shape} vs {t.shape}")
    return float(np.linalg.norm(second_difference(p) - second_difference(t), axis=-1).mean())


# ---------------------------------------------------------------------------
# reports and throughput


@dataclass
class EvalReport:
    mpjpe: float
    pa_mpjpe: float
    pve: float
    accel: float
    throughput: float = 0.0
    fingerprint: str = ""
    stage: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in ("mpjpe", "pa_mpjpe", "pve", "accel"):
            if getattr(self, k) < 0:
                raise MetricError(f"{k} must be non-negative")
        if self.pa_mpjpe > self.mpjpe + 1e-9:
            raise MetricError("pa_mpjpe exceeds mpjpe")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate_clips(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray], skin: SkinSpec,
                   **kw) -> EvalReport:
    """Metrics averaged over frames; Accel averaged per clip then over clips."""
    P, T = np.concatenate(preds), np.concatenate(truths)
    accel = float(np.mean([accel_error(p, t) for p, t in zip(preds, truths)]))
    return EvalReport(mpjpe(P, T), pa_mpjpe(P, T), pve_analog(P, T, skin), accel, **kw)


def hardware_fingerprint(threads: int | None = None) -> dict:
    return {"machine": platform.machine(), "processor": platform.processor() or "unknown",
            "cpus": os.cpu_count(), "python": platform.python_version(),
            "torch": torch.__version__, "threads": threads or torch.get_num_threads()}


@dataclass
class ThroughputResult:
    fps: float
    frames: int
    repetitions: int
    warmup: int
    seconds: list[float]
    hardware: dict


def throughput(run: Callable[[object], object], workload: Sequence, repetitions: int = 50,
               warmup: int = 10, threads: int | None = None) -> ThroughputResult:
    """Median frames/second of ``run`` over ``workload`` after warm-up passes.

    ``workload`` is a sequence of batches; each batch's ``len`` counts frames.
    """
    if repetitions < 1:
        raise MetricError("repetitions must be >= 1")
    if not workload:
        raise MetricError("empty workload")
    frames = sum(len(b) for b in workload)
    if frames == 0:
        raise MetricError("empty workload")
    prev = torch.get_num_threads()
    if threads:
        torch.set_num_threads(threads)
    try:
        with torch.no_grad():
            for _ in range(warmup):
                for b in workload:
                    run(b)
            times = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                for b in workload:
                    run(b)
                times.append(time.perf_counter() - t0)
    finally:
        torch.set_num_threads(prev)
    return ThroughputResult(frames / statistics.median(times), frames, repetitions, warmup, times,
                            hardware_fingerprint(threads))
