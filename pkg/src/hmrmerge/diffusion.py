"""Latent diffusion: noise schedule, v-parameterisation, hybrid loss,
conditional denoiser with long skips, and deterministic samplers.

Timesteps are 1-based (``1 <= t <= T``) everywhere in the public API.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .io import read_container, write_container

log = logging.getLogger(__name__)

DENOISER_KIND = "latent-denoiser"


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class DiffusionSchedule:
    """``betas``/``alphas`` are the raw tables; ``alpha_bars`` is the cumulative
    product, rescaled when ``zero_terminal`` is set (``raw_alpha_bars`` keeps
    the product itself)."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    raw_alpha_bars: np.ndarray
    zero_terminal: bool

    def _idx(self, t):
        t = torch.as_tensor(t)
        if torch.any(t < 1) or torch.any(t > self.T):
            raise ValueError(f"timestep outside [1, {self.T}]")
        return t.long() - 1

    def coefficients(self, t, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) broadcastable against ``like``.

        ``t`` is a scalar or a per-sample (B,) vector.
        """
        idx = self._idx(t)
        ab = torch.as_tensor(self.alpha_bars, dtype=like.dtype)[idx]
        a = ab.sqrt()
        b = (1.0 - ab).sqrt()
        if a.ndim:
            shape = (-1,) + (1,) * (like.ndim - 1)
            a, b = a.view(shape), b.view(shape)
        return a, b


def build_schedule(T: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012,
                   kind: str = "scaled_linear", zero_terminal: bool = True) -> DiffusionSchedule:
    if kind != "scaled_linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError("need 0 < beta_start < beta_end < 1")
    steps = np.arange(T, dtype=np.float64) / (T - 1)
    betas = (math.sqrt(beta_start) + steps * (math.sqrt(beta_end) - math.sqrt(beta_start))) ** 2
    alphas = 1.0 - betas
    raw = np.cumprod(alphas)
    ab = raw
    if zero_terminal:
        s = np.sqrt(raw)
        s1, sT = s[0], s[-1]
        s = (s - sT) * s1 / (s1 - sT)
        s[-1] = 0.0  # exact, not merely ~1e-17
        ab = s ** 2
    return DiffusionSchedule(T, betas, alphas, ab, raw, zero_terminal)


# ---------------------------------------------------------------------------
# parameterisation


def _t(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def forward_diffuse(schedule: DiffusionSchedule, z0, t, eps):
    z0, eps = _t(z0), _t(eps)
    if z0.shape != eps.shape:
        raise ValueError("Z_0 and noise shapes differ")
    a, b = schedule.coefficients(t, z0)
    return a * z0 + b * eps


def v_target(schedule: DiffusionSchedule, z0, eps, t):
    z0, eps = _t(z0), _t(eps)
    if z0.shape != eps.shape:
        raise ValueError("Z_0 and noise shapes differ")
    a, b = schedule.coefficients(t, z0)
    return a * eps - b * z0


def recover_z0(schedule: DiffusionSchedule, zt, v, t):
    zt, v = _t(zt), _t(v)
    a, b = schedule.coefficients(t, zt)
    return a * zt - b * v


def eps_from_v(schedule: DiffusionSchedule, zt, v, t):
    zt, v = _t(zt), _t(v)
    a, b = schedule.coefficients(t, zt)
    return a * v + b * zt


@dataclass
class HybridLoss:
    total: torch.Tensor
    v_term: torch.Tensor
    eps_term: torch.Tensor

    def __iter__(self):
        return iter((self.total, self.v_term, self.eps_term))


def hybrid_loss(schedule: DiffusionSchedule, v_hat, zt, t, z0, eps, lam_v: float = 1.0,
                lam_eps: float = 1.0) -> HybridLoss:
    """lam_v * |v_hat - v|^2 + lam_eps * |eps_hat - eps|^2, mean over entries.

    ``eps_hat = sqrt(ab) v_hat + sqrt(1 - ab) zt``.  Its error is evaluated as
    ``sqrt(ab) (v_hat - v) + sqrt(1 - ab) (zt - zt_true)``, which is the same
    quantity rearranged with ``ab + (1 - ab) = 1``; it avoids cancellation and
    is exactly zero for a perfect prediction.
    """
    v_hat, zt, z0, eps = _t(v_hat), _t(zt), _t(z0), _t(eps)
    v = v_target(schedule, z0, eps, t)
    if v_hat.shape != v.shape or zt.shape != v.shape:
        raise ValueError("prediction, noisy latent and target shapes differ")
    a, b = schedule.coefficients(t, zt)
    dv = v_hat - v
    deps = a * dv + b * (zt - forward_diffuse(schedule, z0, t, eps))
    v_term = (dv ** 2).mean()
    eps_term = (deps ** 2).mean()
    return HybridLoss(lam_v * v_term + lam_eps * eps_term, v_term, eps_term)


# objective name -> (lambda_v, lambda_eps)
OBJECTIVES = {"noise": (0.0, 1.0), "v": (1.0, 0.0), "both": (1.0, 1.0)}

# alpha_bar used in place of 0 when a noise prediction has to be turned into Z_0
EPS_ALPHA_BAR_FLOOR = 2.0 ** -24


def v_from_eps(schedule: DiffusionSchedule, zt, eps_hat, t):
    """v implied by a noise prediction: Z_0 = (Z_t - sqrt(1-ab) eps) / sqrt(ab).

    At a zero-terminal step Z_0 is undetermined (0/0); alpha_bar is floored
    at ``EPS_ALPHA_BAR_FLOOR`` there, so the result is finite but carries no
    information about Z_0.
    """
    zt, eps_hat = _t(zt), _t(eps_hat)
    a, b = schedule.coefficients(t, zt)
    z0 = (zt - b * eps_hat) / a.clamp_min(math.sqrt(EPS_ALPHA_BAR_FLOOR))
    return a * eps_hat - b * z0


# ---------------------------------------------------------------------------
# denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 5
    heads: int = 4
    latent_dim: int = 32
    ff_dim: int = 128
    dropout: float = 0.0
    cond_dim: int = 64
    latent_tokens: int = 4
    frames: int = 36
    time_embedding: str = "sinusoidal-flip"  # cos half first, no frequency shift
    prediction: str = "v"  # or "eps": the network outputs the noise directly
    seed: int = 0

    def __post_init__(self):
        for k in ("layers", "heads", "latent_dim", "ff_dim", "cond_dim", "latent_tokens", "frames"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.latent_dim % self.heads:
            raise ValueError("latent_dim must be divisible by heads")
        if self.prediction not in ("v", "eps"):
            raise ValueError(f"prediction must be 'v' or 'eps', got {self.prediction!r}")
        if self.time_embedding != "sinusoidal-flip":
            raise ValueError(f"unknown timestep embedding {self.time_embedding!r}")

    @property
    def skip_pairs(self) -> list[tuple[int, int]]:
        """(source, target): the output of layer i feeds the input of layer L-1-i."""
        n = self.layers
        return [(i, n - 1 - i) for i in range(n // 2)]


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding with the cosine half first."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    ang = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class Denoiser(nn.Module):
    """Predicts v (or the noise, with ``prediction="eps"``) from
    (Z_t, t, per-frame condition features).

    Condition rows are projected to the latent width and placed before the
    latent tokens; only the latent positions are read out.  Latents are
    standardised with per-entry statistics fitted on training latents; the
    diffusion runs in that standardised space.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        d = cfg.latent_dim
        self.cond_proj = nn.Linear(cfg.cond_dim, d)
        self.latent_proj = nn.Linear(d, d)
        self.pos = nn.Parameter(torch.randn(cfg.frames + cfg.latent_tokens, d) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList([
            nn.TransformerEncoderLayer(d, cfg.heads, cfg.ff_dim, cfg.dropout, activation="gelu",
                                       batch_first=True, norm_first=True)
            for _ in range(cfg.layers)])
        self.skip_proj = nn.ModuleDict({str(dst): nn.Linear(2 * d, d) for _, dst in cfg.skip_pairs})
        self.out_norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, d)
        self.register_buffer("cond_mean", torch.zeros(cfg.cond_dim))
        self.register_buffer("cond_std", torch.ones(cfg.cond_dim))
        self.register_buffer("latent_mean", torch.zeros(cfg.latent_tokens, d))
        self.register_buffer("latent_std", torch.ones(cfg.latent_tokens, d))

    def fit_normalizers(self, cond: np.ndarray, latents: np.ndarray) -> None:
        c = torch.as_tensor(np.asarray(cond).reshape(-1, self.cfg.cond_dim), dtype=torch.float32)
        z = torch.as_tensor(np.asarray(latents), dtype=torch.float32)
        with torch.no_grad():
            self.cond_mean.copy_(c.mean(0))
            self.cond_std.copy_(c.std(0).clamp_min(1e-4))
            self.latent_mean.copy_(z.mean(0))
            self.latent_std.copy_(z.std(0).clamp_min(1e-4) if len(z) > 1 else torch.ones_like(z[0]))

    def to_model_space(self, z0: torch.Tensor) -> torch.Tensor:
        return (z0 - self.latent_mean) / self.latent_std

    def from_model_space(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.latent_std + self.latent_mean

    def forward(self, zt: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        zt = torch.as_tensor(zt, dtype=torch.float32)
        cond = torch.as_tensor(cond, dtype=torch.float32)
        if zt.ndim != 3 or tuple(zt.shape[1:]) != (cfg.latent_tokens, cfg.latent_dim):
            raise ValueError(f"Z_t must be (B, {cfg.latent_tokens}, {cfg.latent_dim}), got {tuple(zt.shape)}")
        if cond.ndim != 3 or tuple(cond.shape[1:]) != (cfg.frames, cfg.cond_dim) or len(cond) != len(zt):
            raise ValueError(f"condition must be (B, {cfg.frames}, {cfg.cond_dim}), got {tuple(cond.shape)}")
        bsz = len(zt)
        t = torch.as_tensor(t).reshape(-1).expand(bsz)
        temb = self.time_mlp(timestep_embedding(t, cfg.latent_dim))
        c = self.cond_proj((cond - self.cond_mean) / self.cond_std)
        x = torch.cat([c, self.latent_proj(zt)], dim=1) + self.pos + temb[:, None]
        saved = {}
        sources = {s: dst for s, dst in cfg.skip_pairs}
        for i, block in enumerate(self.blocks):
            if str(i) in self.skip_proj:
                src = cfg.layers - 1 - i
                x = self.skip_proj[str(i)](torch.cat([x, saved.pop(src)], dim=-1))
            x = block(x)
            if i in sources:
                saved[i] = x
        return self.out(self.out_norm(x[:, cfg.frames:]))


def denoise(denoiser: Denoiser, zt, t, condition) -> torch.Tensor:
    denoiser.eval()
    with torch.no_grad():
        return denoiser(zt, t, condition)


# ---------------------------------------------------------------------------
# sampling


def sample_timesteps(T: int, steps: int) -> list[int]:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > T:
        raise ValueError(f"steps={steps} exceeds T={T}")
    return [int(round(v)) for v in np.linspace(T, 1, steps)] if steps > 1 else [T]


def sample(denoiser: Callable, schedule: DiffusionSchedule, condition, steps: int = 1, seed: int = 0,
           shape: tuple[int, ...] | None = None) -> torch.Tensor:
    """Deterministic sampler starting from standard-normal Z_T.

    ``denoiser(z_t, t, condition)`` returns v, or the noise when its
    ``cfg.prediction`` is ``"eps"`` (converted with :func:`v_from_eps`).  One step returns the
    Z_0 recovered at ``t = T``; more steps walk a uniformly strided timestep
    subsequence with variance-free updates.  Works in the denoiser's own
    latent space (see :meth:`Denoiser.from_model_space`).
    """
    if steps == 1 and not schedule.zero_terminal:
        raise ValueError("one-step sampling needs a zero-terminal schedule")
    ts = sample_timesteps(schedule.T, steps)
    if shape is None:
        cfg = denoiser.cfg
        shape = (len(condition), cfg.latent_tokens, cfg.latent_dim)
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(shape, generator=gen, dtype=torch.float64)
    if isinstance(denoiser, nn.Module):
        denoiser.eval()
    eps_net = getattr(getattr(denoiser, "cfg", None), "prediction", "v") == "eps"
    with torch.no_grad():
        z0 = z
        for k, t in enumerate(ts):
            v = torch.as_tensor(denoiser(z, t, condition)).to(torch.float64)
            if eps_net:
                v = v_from_eps(schedule, z, v, t)
            z0 = recover_z0(schedule, z, v, t)
            if k + 1 < len(ts):
                eps = eps_from_v(schedule, z, v, t)
                z = forward_diffuse(schedule, z0, ts[k + 1], eps)
    return z0


# ---------------------------------------------------------------------------
# training


@dataclass
class DenoiserData:
    """Training pairs: per-clip latents (posterior means) and conditions."""

    latents: np.ndarray  # (n, N_Z, D_Z)
    conditions: np.ndarray  # (n, F, D_F)


@dataclass
class DenoiserTrainLog:
    losses: list[float] = field(default_factory=list)
    v_terms: list[float] = field(default_factory=list)
    eps_terms: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def to_csv(self, path: str | Path) -> None:
        rows = ["epoch,loss,v_term,eps_term"] + [
            f"{i + 1},{a:.8g},{b:.8g},{c:.8g}"
            for i, (a, b, c) in enumerate(zip(self.losses, self.v_terms, self.eps_terms))]
        Path(path).write_text("\n".join(rows) + "\n")


def train_denoiser(denoiser: Denoiser, schedule: DiffusionSchedule, data: DenoiserData | Callable,
                   epochs: int = 100, lr: float = 1e-3, batch: int = 32, seed: int = 0,
                   objective: str = "both", weight_decay: float = 0.01) -> tuple[Denoiser, DenoiserTrainLog]:
    """AdamW training on the hybrid objective.

    ``data`` is either a fixed :class:`DenoiserData` or ``data(epoch)``
    returning a fresh one (used for per-epoch augmentation).  Normalisers are
    fitted on the first epoch's data.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}; choose from {sorted(OBJECTIVES)}")
    lam_v, lam_eps = OBJECTIVES[objective]
    eps_net = denoiser.cfg.prediction == "eps"
    if eps_net and lam_v:
        raise ValueError(f"objective {objective!r} needs a v-prediction network")
    t0 = time.perf_counter()
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    first = data(0) if callable(data) else data
    if len(first.latents) == 0:
        raise ValueError("empty training set")
    denoiser.fit_normalizers(first.conditions, first.latents)
    opt = torch.optim.AdamW(denoiser.parameters(), lr=lr, weight_decay=weight_decay)
    logbook = DenoiserTrainLog()
    for epoch in range(epochs):
        cur = first if epoch == 0 or not callable(data) else data(epoch)
        Z = denoiser.to_model_space(torch.as_tensor(cur.latents, dtype=torch.float32))
        C = torch.as_tensor(cur.conditions, dtype=torch.float32)
        denoiser.train()
        perm = torch.randperm(len(Z), generator=gen)
        sums = np.zeros(3)
        for s in range(0, len(Z), batch):
            idx = perm[s:s + batch]
            z0 = Z[idx]
            t = torch.randint(1, schedule.T + 1, (len(idx),), generator=gen)
            eps = torch.randn(z0.shape, generator=gen)
            zt = forward_diffuse(schedule, z0, t, eps)
            out = denoiser(zt, t, C[idx])
            if eps_net:
                err = ((out - eps) ** 2).mean()
                res = HybridLoss(lam_eps * err, torch.zeros(()), err)
            else:
                res = hybrid_loss(schedule, out, zt, t, z0, eps, lam_v, lam_eps)
            if not torch.isfinite(res.total):
                raise TrainingDiverged(f"denoiser loss became {res.total.item()} at epoch {epoch + 1}")
            opt.zero_grad()
            res.total.backward()
            opt.step()
            sums += np.array([res.total.item(), res.v_term.item(), res.eps_term.item()]) * len(idx)
        sums /= len(Z)
        logbook.losses.append(float(sums[0]))
        logbook.v_terms.append(float(sums[1]))
        logbook.eps_terms.append(float(sums[2]))
    denoiser.eval()
    logbook.seconds = time.perf_counter() - t0
    return denoiser, logbook


def sample_latents(denoiser: Denoiser, schedule: DiffusionSchedule, condition, steps: int = 1,
                   seed: int = 0) -> np.ndarray:
    """Sample and map back to the VAE's latent space, (B, N_Z, D_Z)."""
    z = sample(denoiser, schedule, condition, steps, seed)
    with torch.no_grad():
        return denoiser.from_model_space(z.float()).double().numpy()


def save_denoiser(denoiser: Denoiser, path: str | Path) -> Path:
    arrays = {k: v.detach().numpy() for k, v in denoiser.state_dict().items()}
    return write_container(path, DENOISER_KIND, {"config": asdict(denoiser.cfg)}, arrays)


def load_denoiser(path: str | Path) -> Denoiser:
    header, arrays = read_container(path, DENOISER_KIND)
    den = Denoiser(DenoiserConfig(**header["config"]))
    state = den.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    den.load_state_dict({k: torch.as_tensor(arrays[k]) for k in state})
    den.eval()
    return den
