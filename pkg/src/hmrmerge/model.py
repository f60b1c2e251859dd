"""Toy ViT-style backbone with per-layer parameters stored as flat vectors.

Each encoder layer is a pre-norm block::

    x = x + Attn(LN1(x))
    x = x + MLP(LN2(x))

and owns exactly one flat parameter vector laid out as :data:`LAYER_LAYOUT`.
A vector of zeros is therefore an exact identity layer.  Layer merging works
purely on these vectors.

A cross-attention head with learned queries pools the final token set into
one per-frame feature vector, so the output size does not depend on how many
tokens survive token merging.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .io import read_container, write_container
from .pose import PoseFrame, normalize_twists
from .token_merge import MergeSchedule, TokenState, corner_ids, match_batch, merge_batch

# (name, shape) per layer; symbolic dims: D = token_dim, H = ff_dim.
# Weights are stored (in, out) so y = x @ W + b.
LAYER_LAYOUT = (
    ("ln1_gain", ("D",)),
    ("ln1_bias", ("D",)),
    ("qkv_weight", ("D", "3D")),
    ("qkv_bias", ("3D",)),
    ("attn_out_weight", ("D", "D")),
    ("attn_out_bias", ("D",)),
    ("ln2_gain", ("D",)),
    ("ln2_bias", ("D",)),
    ("ff1_weight", ("D", "H")),
    ("ff1_bias", ("H",)),
    ("ff2_weight", ("H", "D")),
    ("ff2_bias", ("D",)),
)


class ModelError(ValueError):
    pass


class NumericalInstability(FloatingPointError):
    def __init__(self, layer: int):
        super().__init__(f"non-finite activations after layer {layer}")
        self.layer = layer


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 12
    token_dim: int = 32
    heads: int = 2
    ff_dim: int = 64
    tokens_per_frame: int = 196
    input_dim: int = 19
    feature_dim: int = 64
    queries: int = 16
    n_joints: int = 8
    n_shape: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ModelError("depth must be >= 1")
        if self.token_dim % self.heads:
            raise ModelError("token_dim must be divisible by heads")
        if self.tokens_per_frame < 2 or self.tokens_per_frame % 2:
            raise ModelError("tokens_per_frame must be even and >= 2")
        if self.feature_dim < 1:
            raise ModelError("feature_dim must be >= 1")

    @property
    def n_twists(self) -> int:
        return self.n_joints - 1

    @property
    def pose_dim(self) -> int:
        return 3 * self.n_joints + 2 * self.n_twists


def layer_slices(cfg: ModelConfig) -> dict[str, tuple[int, int, tuple[int, ...]]]:
    sym = {"D": cfg.token_dim, "3D": 3 * cfg.token_dim, "H": cfg.ff_dim}
    out, pos = {}, 0
    for name, dims in LAYER_LAYOUT:
        shape = tuple(sym[d] for d in dims)
        size = math.prod(shape)
        out[name] = (pos, pos + size, shape)
        pos += size
    return out


def layer_size(cfg: ModelConfig) -> int:
    return max(stop for _, stop, _ in layer_slices(cfg).values())


def sincos_2d(n_tokens: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    """Fixed 2D sine/cosine table for a square token grid (zero-padded if needed)."""
    grid = int(round(math.sqrt(n_tokens)))
    out = torch.zeros(n_tokens, dim, dtype=dtype)
    if grid * grid != n_tokens or dim < 4:
        return out
    quarter = dim // 4
    freq = 1.0 / (100.0 ** (torch.arange(quarter, dtype=dtype) / max(quarter, 1)))
    rows, cols = torch.meshgrid(torch.arange(grid, dtype=dtype), torch.arange(grid, dtype=dtype), indexing="ij")
    parts = []
    for coord in (rows.reshape(-1), cols.reshape(-1)):
        ang = coord[:, None] * freq[None]
        parts += [torch.sin(ang), torch.cos(ang)]
    table = torch.cat(parts, dim=1)
    out[:, : table.shape[1]] = table
    return out


def init_layer(cfg: ModelConfig, gen: torch.Generator, dtype=torch.float64) -> torch.Tensor:
    flat = torch.zeros(layer_size(cfg), dtype=dtype)
    for name, (lo, hi, shape) in layer_slices(cfg).items():
        if name.endswith("gain"):
            flat[lo:hi] = 1.0
        elif name.endswith("weight"):
            std = 1.0 / math.sqrt(shape[0])
            flat[lo:hi] = torch.randn(hi - lo, generator=gen, dtype=dtype) * std
    return flat


class Backbone(nn.Module):
    """Token embedding, ``depth`` flat-parameter layers, cross-attention head,
    and linear pose/shape heads."""

    def __init__(self, cfg: ModelConfig, dtype=torch.float64):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(cfg.seed)
        d = cfg.token_dim
        rnd = lambda *s: torch.randn(*s, generator=g, dtype=dtype)
        self.embed_weight = nn.Parameter(rnd(cfg.input_dim, d) / math.sqrt(cfg.input_dim))
        self.embed_bias = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.pos_embed = nn.Parameter(sincos_2d(cfg.tokens_per_frame, d, dtype))
        self.layers = nn.ParameterList([nn.Parameter(init_layer(cfg, g, dtype)) for _ in range(cfg.depth)])
        self.final_gain = nn.Parameter(torch.ones(d, dtype=dtype))
        self.final_bias = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.queries = nn.Parameter(rnd(cfg.queries, d) * 0.5)
        self.xq = nn.Parameter(rnd(d, d) / math.sqrt(d))
        self.xkv = nn.Parameter(rnd(d, 2 * d) / math.sqrt(d))
        self.head_weight = nn.Parameter(rnd(cfg.queries * d, cfg.feature_dim) / math.sqrt(cfg.queries * d))
        self.head_bias = nn.Parameter(torch.zeros(cfg.feature_dim, dtype=dtype))
        self.pose_weight = nn.Parameter(rnd(cfg.feature_dim, cfg.pose_dim) / math.sqrt(cfg.feature_dim))
        self.pose_bias = nn.Parameter(torch.zeros(cfg.pose_dim, dtype=dtype))
        self.shape_weight = nn.Parameter(rnd(cfg.feature_dim, cfg.n_shape) / math.sqrt(cfg.feature_dim))
        self.shape_bias = nn.Parameter(torch.zeros(cfg.n_shape, dtype=dtype))
        # per-channel input standardisation, fitted on training tokens
        self.register_buffer("input_mean", torch.zeros(cfg.input_dim, dtype=dtype))
        self.register_buffer("input_std", torch.ones(cfg.input_dim, dtype=dtype))
        self._slices = layer_slices(cfg)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def dtype(self) -> torch.dtype:
        return self.embed_weight.dtype

    def layer_params(self, i: int) -> np.ndarray:
        return self.layers[i].detach().cpu().numpy().astype(np.float64)

    def unpack(self, flat: torch.Tensor) -> dict[str, torch.Tensor]:
        return {k: flat[lo:hi].view(shape) for k, (lo, hi, shape) in self._slices.items()}

    # -- trunk --------------------------------------------------------------

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        z = (tokens - self.input_mean) / self.input_std
        return z @ self.embed_weight + self.embed_bias + self.pos_embed

    def keys(self, flat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        p = self.unpack(flat)
        d = self.cfg.token_dim
        h = F.layer_norm(x, (d,), p["ln1_gain"], p["ln1_bias"])
        return h @ p["qkv_weight"][:, d:2 * d] + p["qkv_bias"][d:2 * d]

    def apply_layer(self, flat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        p = self.unpack(flat)
        bsz, n, d = x.shape
        heads = self.cfg.heads
        h = F.layer_norm(x, (d,), p["ln1_gain"], p["ln1_bias"])
        qkv = (h @ p["qkv_weight"] + p["qkv_bias"]).view(bsz, n, 3, heads, d // heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        att = F.scaled_dot_product_attention(q, k, v)
        att = att.transpose(1, 2).reshape(bsz, n, d)
        x = x + att @ p["attn_out_weight"] + p["attn_out_bias"]
        h = F.layer_norm(x, (d,), p["ln2_gain"], p["ln2_bias"])
        h = F.gelu(h @ p["ff1_weight"] + p["ff1_bias"])
        return x + h @ p["ff2_weight"] + p["ff2_bias"]

    def trunk(self, tokens: torch.Tensor, person: torch.Tensor | None = None,
              plan: MergeSchedule | None = None, trace: list | None = None,
              merge_log: list | None = None, layer_mask: list[bool] | None = None,
              check: bool = True) -> torch.Tensor:
        """Run embedding and all layers on a (B, N, input_dim) batch.

        With a merge plan, tokens are merged at the input of each of the first
        ``plan.layers`` layers.  ``trace`` collects each layer's output;
        ``merge_log`` collects (a_pos, b_pos, count) per merging layer;
        ``layer_mask`` skips layers marked False (used for layer-drop training).
        """
        if tokens.ndim != 3 or tokens.shape[1:] != (self.cfg.tokens_per_frame, self.cfg.input_dim):
            raise ModelError(f"expected tokens (B, {self.cfg.tokens_per_frame}, {self.cfg.input_dim}), "
                             f"got {tuple(tokens.shape)}")
        x = self.embed(tokens.to(self.dtype))
        bsz, n, _ = x.shape
        if plan is not None and plan.layers:
            prot = torch.zeros(bsz, n, dtype=torch.bool)
            if plan.use_mask:
                if person is None:
                    raise ModelError("merge plan uses the person mask but none was given")
                prot = prot | person.to(torch.bool)
            if plan.protect_corners:
                grid = int(round(math.sqrt(n)))
                prot[:, torch.as_tensor(corner_ids(grid))] = True
            sizes = torch.ones(bsz, n, dtype=torch.long)
        for i, flat in enumerate(self.layers):
            if plan is not None and i < plan.layers:
                cur = x.shape[1]
                want = min(plan.per_layer, cur - plan.floor)
                # re-match until the layer quota is met (one round keeps only
                # each A token's best partner, so it can fall short)
                while want > 0:
                    m = x.shape[1] - (x.shape[1] % 2)  # odd count: last token sits out
                    metric = x if plan.similarity == "features" else self.keys(flat, x)
                    a_pos, b_pos = match_batch(metric[:, :m], prot[:, :m], want)
                    if a_pos.shape[1] == 0:
                        break
                    x, (prot,), sizes = merge_batch(x, a_pos, b_pos, [prot], sizes, plan.mode)
                    want -= a_pos.shape[1]
                    if merge_log is not None:
                        merge_log.append((a_pos, b_pos, x.shape[1]))
            if layer_mask is None or layer_mask[i]:
                x = self.apply_layer(flat, x)
            if check and not torch.isfinite(x).all():
                raise NumericalInstability(i)
            if trace is not None:
                trace.append(x)
        return x

    def head(self, x: torch.Tensor) -> torch.Tensor:
        d = self.cfg.token_dim
        bsz = x.shape[0]
        h = F.layer_norm(x, (d,), self.final_gain, self.final_bias)
        kv = h @ self.xkv
        k, v = kv[..., :d], kv[..., d:]
        q = (self.queries @ self.xq).expand(bsz, -1, -1)
        heads = self.cfg.heads
        split = lambda t: t.view(bsz, -1, heads, d // heads).transpose(1, 2)
        att = F.scaled_dot_product_attention(split(q), split(k), split(v))
        pooled = att.transpose(1, 2).reshape(bsz, -1)
        return F.gelu(pooled @ self.head_weight + self.head_bias)

    def features(self, tokens, person=None, plan=None, **kw) -> torch.Tensor:
        return self.head(self.trunk(tokens, person, plan, **kw))

    def pose_vectors(self, feats: torch.Tensor) -> torch.Tensor:
        return feats @ self.pose_weight + self.pose_bias

    def shape_vectors(self, feats: torch.Tensor) -> torch.Tensor:
        return feats @ self.shape_weight + self.shape_bias

    def predict_joints(self, tokens, person=None, plan=None) -> torch.Tensor:
        raw = self.pose_vectors(self.features(tokens, person, plan))
        return raw[:, : 3 * self.cfg.n_joints].reshape(-1, self.cfg.n_joints, 3)


# ---------------------------------------------------------------------------
# functional surface


@dataclass
class FrameOutput:
    feature: np.ndarray
    pose: PoseFrame
    shape: np.ndarray
    token_count: int


def _as_batch(tokens: TokenState | np.ndarray):
    if isinstance(tokens, TokenState):
        return torch.as_tensor(tokens.features)[None], torch.as_tensor(tokens.person_mask)[None]
    arr = torch.as_tensor(np.asarray(tokens))
    return (arr[None] if arr.ndim == 2 else arr), None


def split_pose(model: Backbone, raw: np.ndarray) -> list[PoseFrame]:
    nj = model.cfg.n_joints
    out = []
    for r in np.atleast_2d(raw):
        tw = normalize_twists(r[3 * nj:].reshape(-1, 2))
        out.append(PoseFrame(r[: 3 * nj].reshape(nj, 3), tw))
    return out


@torch.no_grad()
def forward(model: Backbone, tokens: TokenState, merge_plan: MergeSchedule | None = None) -> FrameOutput:
    """Single-frame inference: feature vector, pose estimate, shape estimate."""
    if len(tokens) != model.cfg.tokens_per_frame:
        raise ModelError(f"{len(tokens)} tokens given, model expects {model.cfg.tokens_per_frame}")
    if tokens.features.shape[1] != model.cfg.input_dim:
        raise ModelError(f"token width {tokens.features.shape[1]} != {model.cfg.input_dim}")
    x, person = _as_batch(tokens)
    log: list = []
    feat = model.head(model.trunk(x, person, merge_plan, merge_log=log))
    raw = model.pose_vectors(feat).numpy()
    count = log[-1][2] if log else model.cfg.tokens_per_frame
    return FrameOutput(feat[0].numpy(), split_pose(model, raw)[0],
                       model.shape_vectors(feat)[0].numpy(), count)


@torch.no_grad()
def forward_with_trace(model: Backbone, tokens: TokenState | np.ndarray) -> list[np.ndarray]:
    """Output of every layer (N x D each) for one frame, no token merging."""
    x, _ = _as_batch(tokens)
    trace: list = []
    model.trunk(x, trace=trace)
    return [t[0].numpy() for t in trace]


@torch.no_grad()
def batch_trace(model: Backbone, tokens: np.ndarray) -> list[np.ndarray]:
    """Per-layer outputs for a (B, N, input_dim) batch, each (B, N, D)."""
    trace: list = []
    model.trunk(torch.as_tensor(tokens), trace=trace)
    return [t.numpy() for t in trace]


@torch.no_grad()
def predict_batch(model: Backbone, tokens: np.ndarray, person: np.ndarray | None = None,
                  plan: MergeSchedule | None = None, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """(features (B, D_F), raw pose vectors (B, pose_dim)) for a token batch."""
    feats = []
    for s in range(0, len(tokens), chunk):
        t = torch.as_tensor(tokens[s:s + chunk])
        p = None if person is None else torch.as_tensor(person[s:s + chunk])
        feats.append(model.features(t, p, plan))
    f = torch.cat(feats)
    return f.numpy(), model.pose_vectors(f).numpy()


def replace_layers(model: Backbone, low: int, high: int, merged: np.ndarray | torch.Tensor) -> Backbone:
    """Copy of ``model`` whose layers ``low..high`` (inclusive) become ``merged``."""
    if not 0 <= low < high < model.depth:
        raise ModelError(f"invalid layer range [{low}, {high}] for depth {model.depth}")
    merged = torch.as_tensor(np.asarray(merged), dtype=model.dtype)
    if merged.shape != model.layers[0].shape:
        raise ModelError(f"merged layer has {merged.numel()} values, expected {model.layers[0].numel()}")
    out = copy.deepcopy(model)
    kept = [p for i, p in enumerate(out.layers) if i < low or i > high]
    kept.insert(low, nn.Parameter(merged.clone()))
    out.layers = nn.ParameterList(kept)
    return out


def zero_layers(model: Backbone, indices) -> Backbone:
    """Copy with the listed layers set to exact identities (all-zero vectors)."""
    out = copy.deepcopy(model)
    with torch.no_grad():
        for i in indices:
            out.layers[i].zero_()
    return out


# ---------------------------------------------------------------------------
# checkpoints

BACKBONE_KIND = "backbone"


def save_backbone(model: Backbone, path: str | Path) -> Path:
    arrays = {f"layer_{i:03d}": model.layer_params(i) for i in range(model.depth)}
    for name, p in model.named_parameters():
        if not name.startswith("layers."):
            arrays[name] = p.detach().numpy()
    for name, b in model.named_buffers():
        arrays[name] = b.numpy()
    header = {"config": asdict(model.cfg), "depth": model.depth, "layer_size": layer_size(model.cfg)}
    return write_container(path, BACKBONE_KIND, header, arrays)


def load_backbone(path: str | Path) -> Backbone:
    header, arrays = read_container(path, BACKBONE_KIND)
    cfg = ModelConfig(**header["config"])
    model = Backbone(cfg)
    size = layer_size(cfg)
    layers = []
    for i in range(header["depth"]):
        v = arrays[f"layer_{i:03d}"]
        if v.shape != (size,) or not np.all(np.isfinite(v)):
            raise ModelError(f"{path}: layer {i} has shape {v.shape}, expected ({size},)")
        layers.append(nn.Parameter(torch.as_tensor(v)))
    model.layers = nn.ParameterList(layers)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("layers."):
                continue
            if arrays[name].shape != tuple(p.shape):
                raise ModelError(f"{path}: {name} has shape {arrays[name].shape}, expected {tuple(p.shape)}")
            p.copy_(torch.as_tensor(arrays[name]))
        for name, b in model.named_buffers():
            if name in arrays:
                b.copy_(torch.as_tensor(arrays[name]))
    return model


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    losses: list[float]
    seconds: float


def train_backbone(model: Backbone, tokens: np.ndarray, poses: np.ndarray, shapes: np.ndarray,
                   epochs: int = 20, lr: float = 2e-3, batch: int = 32, seed: int = 0,
                   layer_drop: float = 0.0, shape_weight: float = 0.1, callback=None) -> TrainLog:
    """Supervised per-frame training of the baseline, in place.

    Runs in float32 for speed and copies the weights back.  ``layer_drop``
    skips each layer independently with that probability per step, which
    makes depth redundancy (and hence layer merging) more pronounced.
    """
    import time

    t0 = time.perf_counter()
    flat_in = torch.as_tensor(tokens, dtype=torch.float64).reshape(-1, tokens.shape[-1])
    with torch.no_grad():
        model.input_mean.copy_(flat_in.mean(0))
        model.input_std.copy_(flat_in.std(0).clamp_min(1e-6))
    work = copy.deepcopy(model).float()
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(work.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, epochs))
    X = torch.as_tensor(tokens, dtype=torch.float32)
    Y = torch.as_tensor(poses, dtype=torch.float32)
    S = torch.as_tensor(shapes, dtype=torch.float32)
    losses = []
    for _ in range(epochs):
        perm = torch.randperm(len(X), generator=gen)
        total = 0.0
        for s in range(0, len(X), batch):
            idx = perm[s:s + batch]
            mask = None
            if layer_drop > 0:
                mask = (torch.rand(work.depth, generator=gen) >= layer_drop).tolist()
            feats = work.features(X[idx], layer_mask=mask)
            loss = F.mse_loss(work.pose_vectors(feats), Y[idx]) + \
                shape_weight * F.mse_loss(work.shape_vectors(feats), S[idx])
            if not torch.isfinite(loss):
                raise NumericalInstability(-1)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        losses.append(total / len(X))
        if callback is not None:
            callback(len(losses), work)
    with torch.no_grad():
        for dst, src in zip(list(model.parameters()) + list(model.buffers()),
                            list(work.parameters()) + list(work.buffers())):
            dst.copy_(src.to(dst.dtype))
    return TrainLog(losses, time.perf_counter() - t0)
