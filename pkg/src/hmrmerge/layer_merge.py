"""Layer similarity analysis and error-constrained layer merging.

The merge search walks a window ``[low, high]`` down from the last two layers.
A window is widened while merging it keeps the calibration error within
``tau`` of the unmerged baseline; when widening fails, the last accepted
window is committed (if it spans at least two layers) and the search restarts
just below it.  Candidates are always evaluated on a temporary copy.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .metrics import mpjpe
from .model import Backbone, batch_trace, predict_batch, replace_layers
from .pose import PoseFrame

log = logging.getLogger(__name__)


class UndefinedSimilarity(ValueError):
    pass


# ---------------------------------------------------------------------------
# CKA


def linear_cka(X: np.ndarray, Y: np.ndarray) -> float:
    """Linear CKA between two activation matrices with matching rows.

    Columns are centred internally.  Uses the feature-space identity
    ``<K_X, K_Y> = ||Y^T X||_F^2`` so cost is linear in the row count.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise ValueError(f"activation matrices need equal row counts, got {X.shape} and {Y.shape}")
    if len(X) < 2:
        raise ValueError("need at least two rows")
    X = X - X.mean(0)
    Y = Y - Y.mean(0)
    xx = np.linalg.norm(X.T @ X)
    yy = np.linalg.norm(Y.T @ Y)
    if xx <= 1e-300 or yy <= 1e-300:
        raise UndefinedSimilarity("zero-variance activations: CKA is undefined")
    val = np.linalg.norm(Y.T @ X) ** 2 / (xx * yy)
    return float(min(max(val, 0.0), 1.0))


@dataclass
class CkaMatrix:
    values: np.ndarray

    def to_csv(self, path: str | Path) -> None:
        n = len(self.values)
        lines = ["layer," + ",".join(str(i) for i in range(n))]
        for i, row in enumerate(self.values):
            lines.append(f"{i}," + ",".join(f"{v:.6f}" for v in row))
        Path(path).write_text("\n".join(lines) + "\n")

    def to_pgm(self, path: str | Path, cell: int = 8) -> None:
        """Binary greyscale image, one ``cell`` x ``cell`` block per entry (white = 1)."""
        img = np.kron(np.clip(self.values, 0, 1), np.ones((cell, cell)))
        data = np.round(img * 255).astype(np.uint8)
        h, w = data.shape
        Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def cka_matrix(trace: Sequence[np.ndarray]) -> CkaMatrix:
    """Pairwise CKA over layer outputs; each entry is (B, N, D) or (N, D).

    Rows are pooled across frames and tokens.
    """
    flat = [np.asarray(t).reshape(-1, np.asarray(t).shape[-1]) for t in trace]
    n = len(flat)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = linear_cka(flat[i], flat[j])
    return CkaMatrix(out)


def analyze_cka(model: Backbone, tokens: np.ndarray) -> CkaMatrix:
    return cka_matrix(batch_trace(model, tokens))


# ---------------------------------------------------------------------------
# parameter merging and the search


def merge_layer_params(params: Sequence[np.ndarray]) -> np.ndarray:
    """theta_i + sum_k (theta_{i+k} - theta_i) over the window, elementwise."""
    if len(params) < 2:
        raise ValueError("merging needs at least two layers")
    arrs = [np.asarray(p, dtype=np.float64) for p in params]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ValueError("layer parameter vectors differ in length")
    # summed as theta_last + middle differences: the same value, but exact for
    # pairs (theta_b) and copies (theta) in floating point
    base = arrs[0]
    out = arrs[-1].copy()
    for a in arrs[1:-1]:
        out += a - base
    return out


def merge_range(model: Backbone, low: int, high: int) -> Backbone:
    merged = merge_layer_params([model.layer_params(i) for i in range(low, high + 1)])
    return replace_layers(model, low, high, merged)


@dataclass(frozen=True)
class EclmConfig:
    tau: float = 0.1
    calibration_frames: int = 200  # total, spread evenly over the calibration clips

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.calibration_frames < 1:
            raise ValueError("calibration_frames must be >= 1")


@dataclass
class CalibrationSet:
    tokens: np.ndarray  # (n, N, input_dim)
    joints: np.ndarray  # (n, J, 3)
    person: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class EclmReport:
    merged_ranges: list[list[int]]
    base_error: float
    final_error: float
    layers_before: int
    layers_after: int
    tau: float
    evaluations: int = 0
    history: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def _truth_joints(truth) -> np.ndarray:
    if len(truth) and isinstance(truth[0], PoseFrame):
        return np.stack([t.joints for t in truth])
    return np.asarray(truth, dtype=np.float64)


def extract_error(model: Backbone, frames: np.ndarray, truth, plan=None, person=None) -> float:
    """Mean per-frame MPJPE of the model's pose head over the calibration frames."""
    truth = _truth_joints(truth)
    if len(frames) == 0:
        raise ValueError("empty calibration set")
    if len(frames) != len(truth):
        raise ValueError(f"{len(frames)} frames but {len(truth)} ground-truth poses")
    _, raw = predict_batch(model, frames, person, plan)
    nj = model.cfg.n_joints
    return mpjpe(raw[:, : 3 * nj].reshape(-1, nj, 3), truth)


def eclm_search(model: Backbone, config: EclmConfig, frames: np.ndarray, truth
                ) -> tuple[Backbone, EclmReport]:
    if model.depth < 2:
        raise ValueError("layer merging needs depth >= 2")
    truth = _truth_joints(truth)
    base = extract_error(model, frames, truth)
    current = model
    high = model.depth - 1
    low = high - 1
    ranges: list[list[int]] = []
    history: list[dict] = []
    evals = 1
    while low >= 0:
        cand = merge_range(current, low, high)
        err = extract_error(cand, frames, truth)
        evals += 1
        ok = err - base < config.tau
        history.append({"low": low, "high": high, "error": err, "accepted": bool(ok)})
        if ok:
            low -= 1
        elif low + 1 != high:
            current = merge_range(current, low + 1, high)
            ranges.append([low + 1, high])
            log.info("merged layers %d..%d", low + 1, high)
            high = low
            low = high - 1
        else:
            high -= 1
            low -= 1
    final = extract_error(current, frames, truth) if ranges else base
    report = EclmReport(ranges, base, final, model.depth, current.depth, config.tau, evals, history)
    return current, report


def sample_calibration(clip_lengths: Sequence[int], per_clip: int, seed: int = 0
                       ) -> list[np.ndarray]:
    """Frame indices per clip: ``per_clip`` frames at a uniform stride.

    Clips shorter than ``per_clip`` contribute every frame.  ``seed`` picks the
    stride offset; the stride itself is deterministic.
    """
    if per_clip < 1:
        raise ValueError("per_clip must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for n in clip_lengths:
        if n <= per_clip:
            out.append(np.arange(n))
            continue
        stride = n / per_clip
        offset = rng.uniform(0, stride - np.floor(stride)) if stride % 1 else 0.0
        out.append(np.floor(offset + stride * np.arange(per_clip)).astype(int))
    return out
