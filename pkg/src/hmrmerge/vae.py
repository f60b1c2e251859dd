"""Transformer VAE over fixed-length pose sequences.

The encoder reads ``F`` pose-vector tokens plus ``2 * N_Z`` learned query
tokens; the query outputs become the posterior mean and log-variance.  The
decoder reads ``F`` learned frame queries next to the ``N_Z`` latent tokens
and maps the frame-query outputs back to pose vectors.  Poses are
standardised internally with statistics fitted on the training set.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .io import read_container, write_container
from .pose import MotionClip, normalize_twists

log = logging.getLogger(__name__)

VAE_KIND = "motion-vae"


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class VaeConfig:
    frames: int = 36
    latent_tokens: int = 4
    latent_dim: int = 32
    layers: int = 3
    heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.0
    kl_weight: float = 1e-4
    n_joints: int = 8
    seed: int = 0

    def __post_init__(self):
        for k in ("frames", "latent_tokens", "latent_dim", "layers", "heads", "ff_dim", "n_joints"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.latent_tokens > self.frames:
            raise ValueError("latent_tokens must not exceed frames")
        if self.latent_dim % self.heads:
            raise ValueError("latent_dim must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0 or self.kl_weight < 0:
            raise ValueError("dropout must lie in [0, 1) and kl_weight be >= 0")

    @property
    def pose_dim(self) -> int:
        return 3 * self.n_joints + 2 * (self.n_joints - 1)


@dataclass
class PosteriorParams:
    mean: np.ndarray  # (N_Z, D_Z) or (B, N_Z, D_Z)
    logvar: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ValueError("mean and log-variance shapes differ")
        if not np.all(np.isfinite(self.logvar)):
            raise ValueError("log-variance must be finite")


def _stack(cfg: VaeConfig, n_layers: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(cfg.latent_dim, cfg.heads, cfg.ff_dim, cfg.dropout,
                                       activation="gelu", batch_first=True, norm_first=True)
    return nn.TransformerEncoder(layer, n_layers, enable_nested_tensor=False)


class MotionVAE(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        d, nz, f = cfg.latent_dim, cfg.latent_tokens, cfg.frames
        self.pose_in = nn.Linear(cfg.pose_dim, d)
        self.enc_pos = nn.Parameter(torch.randn(2 * nz + f, d) * 0.02)
        self.enc_queries = nn.Parameter(torch.randn(2 * nz, d) * 0.02)
        self.encoder = _stack(cfg, cfg.layers)
        self.enc_norm = nn.LayerNorm(d)
        # linear heads: a layer-normed stream cannot reach small variances
        self.to_mean = nn.Linear(d, d)
        self.to_logvar = nn.Linear(d, d)
        nn.init.zeros_(self.to_logvar.weight)
        nn.init.constant_(self.to_logvar.bias, -6.0)
        # clip-level linear paths; the transformers model what they miss
        self.enc_linear = nn.Linear(f * cfg.pose_dim, nz * d)
        self.dec_linear = nn.Linear(nz * d, f * cfg.pose_dim)
        self.dec_queries = nn.Parameter(torch.randn(f, d) * 0.02)
        self.dec_pos = nn.Parameter(torch.randn(nz + f, d) * 0.02)
        self.latent_in = nn.Linear(d, d)
        self.decoder = _stack(cfg, cfg.layers)
        self.dec_norm = nn.LayerNorm(d)
        self.pose_out = nn.Linear(d, cfg.pose_dim)
        self.register_buffer("pose_mean", torch.zeros(cfg.pose_dim))
        self.register_buffer("pose_std", torch.ones(cfg.pose_dim))

    def fit_normalizer(self, flat_poses: np.ndarray) -> None:
        x = torch.as_tensor(np.asarray(flat_poses).reshape(-1, self.cfg.pose_dim), dtype=torch.float32)
        with torch.no_grad():
            self.pose_mean.copy_(x.mean(0))
            self.pose_std.copy_(x.std(0).clamp_min(1e-4))

    # tensors are standardised pose vectors, (B, F, pose_dim)
    def encode_tensor(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        bsz = x.shape[0]
        nz = self.cfg.latent_tokens
        tokens = torch.cat([self.enc_queries.expand(bsz, -1, -1), self.pose_in(x)], dim=1)
        h = self.enc_norm(self.encoder(tokens + self.enc_pos))
        shortcut = self.enc_linear(x.flatten(1)).view(bsz, nz, -1)
        return self.to_mean(h[:, :nz]) + shortcut, self.to_logvar(h[:, nz:2 * nz])

    def decode_tensor(self, z: torch.Tensor) -> torch.Tensor:
        bsz = z.shape[0]
        nz = self.cfg.latent_tokens
        tokens = torch.cat([self.latent_in(z), self.dec_queries.expand(bsz, -1, -1)], dim=1)
        h = self.dec_norm(self.decoder(tokens + self.dec_pos))
        shortcut = self.dec_linear(z.flatten(1)).view(bsz, self.cfg.frames, -1)
        return self.pose_out(h[:, nz:]) + shortcut

    def standardize(self, flat: torch.Tensor) -> torch.Tensor:
        return (flat - self.pose_mean) / self.pose_std

    def destandardize(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.pose_std + self.pose_mean


def _clip_batch(vae: MotionVAE, clips) -> torch.Tensor:
    if isinstance(clips, MotionClip):
        clips = [clips]
    for c in clips:
        if len(c) != vae.cfg.frames:
            raise ValueError(f"clip has {len(c)} frames, the VAE expects {vae.cfg.frames}; resample first")
    flat = np.stack([c.flat() for c in clips])
    if flat.shape[-1] != vae.cfg.pose_dim:
        raise ValueError(f"pose vectors have {flat.shape[-1]} entries, expected {vae.cfg.pose_dim}")
    return torch.as_tensor(flat, dtype=torch.float32)


def encode(vae: MotionVAE, clip) -> PosteriorParams:
    """Posterior of one clip (or a list of clips, giving a leading batch axis)."""
    single = isinstance(clip, MotionClip)
    x = _clip_batch(vae, clip)
    vae.eval()
    with torch.no_grad():
        mu, logvar = vae.encode_tensor(vae.standardize(x))
    mu, logvar = mu.double().numpy(), logvar.double().numpy()
    return PosteriorParams(mu[0], logvar[0]) if single else PosteriorParams(mu, logvar)


def decode_flat(vae: MotionVAE, Z: np.ndarray | torch.Tensor) -> np.ndarray:
    """Raw (B, F, pose_dim) pose vectors for a (B, N_Z, D_Z) latent batch."""
    z = torch.as_tensor(np.asarray(Z), dtype=torch.float32)
    want = (vae.cfg.latent_tokens, vae.cfg.latent_dim)
    if z.ndim != 3 or tuple(z.shape[1:]) != want:
        raise ValueError(f"latent batch must be (B, {want[0]}, {want[1]}), got {tuple(z.shape)}")
    vae.eval()
    with torch.no_grad():
        return vae.destandardize(vae.decode_tensor(z)).double().numpy()


def decode(vae: MotionVAE, Z: np.ndarray, fps: float = 30.0) -> MotionClip:
    Z = np.asarray(Z)
    if Z.shape != (vae.cfg.latent_tokens, vae.cfg.latent_dim):
        raise ValueError(f"latent must be {vae.cfg.latent_tokens}x{vae.cfg.latent_dim}, got {Z.shape}")
    return MotionClip.from_flat(decode_flat(vae, Z[None])[0], vae.cfg.n_joints, fps)


def kl_divergence(mean, logvar):
    """Closed-form KL(N(mean, exp(logvar)) || N(0, I)), summed over latent entries."""
    # expm1 keeps exp(lv) - 1 - lv >= 0 for tiny log-variances
    if isinstance(mean, torch.Tensor):
        return 0.5 * (mean ** 2 + torch.expm1(logvar) - logvar).sum(dim=(-2, -1))
    mean, logvar = np.asarray(mean, dtype=np.float64), np.asarray(logvar, dtype=np.float64)
    return 0.5 * float((mean ** 2 + np.expm1(logvar) - logvar).sum())


def vae_loss(clip, reconstruction, posterior: PosteriorParams, kl_weight: float):
    """(total, mse, kl) with mse averaged over pose entries and kl summed over latents."""
    a = clip.flat() if isinstance(clip, MotionClip) else np.asarray(clip, dtype=np.float64)
    b = reconstruction.flat() if isinstance(reconstruction, MotionClip) else np.asarray(reconstruction, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"clip and reconstruction shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    kl = kl_divergence(posterior.mean, posterior.logvar)
    return mse + kl_weight * kl, mse, kl


def reconstruct(vae: MotionVAE, clips: Sequence[MotionClip]) -> list[MotionClip]:
    """Decode each clip's posterior mean."""
    post = encode(vae, list(clips))
    flat = decode_flat(vae, post.mean)
    return [MotionClip.from_flat(f, vae.cfg.n_joints, c.fps) for f, c in zip(flat, clips)]


@dataclass
class VaeTrainLog:
    losses: list[float] = field(default_factory=list)
    mse: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def to_csv(self, path: str | Path) -> None:
        rows = ["epoch,loss,mse,kl"] + [f"{i + 1},{l:.8g},{m:.8g},{k:.8g}"
                                          for i, (l, m, k) in enumerate(zip(self.losses, self.mse, self.kl))]
        Path(path).write_text("\n".join(rows) + "\n")


def train_vae(vae: MotionVAE, dataset: Sequence[MotionClip], epochs: int = 100, lr: float = 1e-3,
              batch: int = 16, seed: int = 0, callback=None) -> tuple[MotionVAE, VaeTrainLog]:
    """Train in place with Adam on reparameterised samples.

    The loss is computed on standardised pose vectors.  ``callback(epoch, vae)``
    runs after every epoch (the model is in train mode again afterwards).
    """
    if not len(dataset):
        raise ValueError("empty training set")
    t0 = time.perf_counter()
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    X = _clip_batch(vae, list(dataset))
    vae.fit_normalizer(X.numpy())
    X = vae.standardize(X)
    opt = torch.optim.Adam(vae.parameters(), lr=lr)
    logbook = VaeTrainLog()
    for epoch in range(epochs):
        vae.train()
        perm = torch.randperm(len(X), generator=gen)
        tot = mse_sum = kl_sum = 0.0
        for s in range(0, len(X), batch):
            xb = X[perm[s:s + batch]]
            mu, logvar = vae.encode_tensor(xb)
            z = mu + torch.randn(mu.shape, generator=gen) * (0.5 * logvar).exp()
            mse = F.mse_loss(vae.decode_tensor(z), xb)
            kl = kl_divergence(mu, logvar).mean()
            loss = mse + vae.cfg.kl_weight * kl
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"VAE loss became {loss.item()} at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            n = len(xb)
            tot += loss.item() * n
            mse_sum += mse.item() * n
            kl_sum += kl.item() * n
        logbook.losses.append(tot / len(X))
        logbook.mse.append(mse_sum / len(X))
        logbook.kl.append(kl_sum / len(X))
        if callback is not None:
            callback(epoch + 1, vae)
    vae.eval()
    logbook.seconds = time.perf_counter() - t0
    return vae, logbook


def save_vae(vae: MotionVAE, path: str | Path) -> Path:
    arrays = {k: v.detach().numpy() for k, v in vae.state_dict().items()}
    return write_container(path, VAE_KIND, {"config": asdict(vae.cfg)}, arrays)


def load_vae(path: str | Path) -> MotionVAE:
    header, arrays = read_container(path, VAE_KIND)
    vae = MotionVAE(VaeConfig(**header["config"]))
    state = vae.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    vae.load_state_dict({k: torch.as_tensor(arrays[k]) for k in state})
    vae.eval()
    return vae
