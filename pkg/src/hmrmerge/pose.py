"""Toy body representation, synthetic kinematic scenes, and clip resampling.

A pose is a set of joint positions plus one roll ("twist") angle per body
segment stored as a (cos, sin) pair.  Scenes are rendered by rasterising the
projected skeleton as a stick figure over a textured background; the same
rasteriser produces the person mask, so masks are exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .io import read_container, write_container

# pelvis, spine, neck, head, left hand, right hand, left foot, right foot
DEFAULT_PARENTS = (-1, 0, 1, 2, 2, 2, 0, 0)
DEFAULT_REST_DIRS = (
    (0.0, 1.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 1.0, 0.0),
    (-0.94, -0.34, 0.0),
    (0.94, -0.34, 0.0),
    (-0.2, -1.0, 0.0),
    (0.2, -1.0, 0.0),
)
DEFAULT_LENGTHS = (1.0, 0.5, 0.4, 1.3, 1.3, 1.6, 1.6)
# swing amplitude (radians) per segment
DEFAULT_SWING = (0.3, 0.3, 0.3, 0.8, 0.8, 0.5, 0.5)


@dataclass(frozen=True)
class PoseFrame:
    joints: np.ndarray  # (n_joints, 3)
    twists: np.ndarray  # (n_twists, 2), rows are (cos, sin)

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=np.float64)
        t = np.asarray(self.twists, dtype=np.float64)
        if j.ndim != 2 or j.shape[1] != 3:
            raise ValueError(f"joints must be (n, 3), got {j.shape}")
        if t.ndim != 2 or t.shape[1] != 2:
            raise ValueError(f"twists must be (n, 2), got {t.shape}")
        if not np.all(np.isfinite(j)):
            raise ValueError("joints must be finite")
        if t.size and np.max(np.abs(np.linalg.norm(t, axis=1) - 1.0)) > 1e-6:
            raise ValueError("twist rows must have unit norm")
        object.__setattr__(self, "joints", j)
        object.__setattr__(self, "twists", t)


@dataclass
class MotionClip:
    """A pose sequence; frames are stored stacked for vectorised maths."""

    joints: np.ndarray  # (F, n_joints, 3)
    twists: np.ndarray  # (F, n_twists, 2)
    fps: float = 30.0

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.twists = np.asarray(self.twists, dtype=np.float64)
        if self.joints.ndim != 3 or self.joints.shape[-1] != 3:
            raise ValueError(f"joints must be (F, n, 3), got {self.joints.shape}")
        if self.twists.ndim != 3 or self.twists.shape[-1] != 2:
            raise ValueError(f"twists must be (F, n, 2), got {self.twists.shape}")
        if len(self.joints) < 1 or len(self.joints) != len(self.twists):
            raise ValueError("clip needs >= 1 frame and equal joint/twist frame counts")

    def __len__(self) -> int:
        return len(self.joints)

    @property
    def frames(self) -> list[PoseFrame]:
        return [PoseFrame(j, t) for j, t in zip(self.joints, self.twists)]

    @classmethod
    def from_frames(cls, frames: list[PoseFrame], fps: float = 30.0) -> "MotionClip":
        return cls(np.stack([f.joints for f in frames]), np.stack([f.twists for f in frames]), fps)

    def reversed(self) -> "MotionClip":
        return MotionClip(self.joints[::-1].copy(), self.twists[::-1].copy(), self.fps)

    def flat(self) -> np.ndarray:
        """(F, 3*n_joints + 2*n_twists) pose vectors."""
        f = len(self)
        return np.concatenate([self.joints.reshape(f, -1), self.twists.reshape(f, -1)], axis=1)

    @classmethod
    def from_flat(cls, flat: np.ndarray, n_joints: int, fps: float = 30.0) -> "MotionClip":
        flat = np.asarray(flat, dtype=np.float64)
        f = len(flat)
        joints = flat[:, : 3 * n_joints].reshape(f, n_joints, 3)
        twists = flat[:, 3 * n_joints:].reshape(f, -1, 2)
        return cls(joints, normalize_twists(twists), fps)


def normalize_twists(twists: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(twists, axis=-1, keepdims=True)
    out = np.where(norm > 1e-12, twists / np.maximum(norm, 1e-300), 0.0)
    # a collapsed pair carries no angle; map it to angle 0
    out[..., 0] = np.where(norm[..., 0] > 1e-12, out[..., 0], 1.0)
    return out


# ---------------------------------------------------------------------------
# scene description and forward kinematics


@dataclass(frozen=True)
class Skeleton:
    parents: tuple[int, ...] = DEFAULT_PARENTS
    rest_dirs: tuple[tuple[float, float, float], ...] = DEFAULT_REST_DIRS
    lengths: tuple[float, ...] = DEFAULT_LENGTHS

    def __post_init__(self):
        n = len(self.parents)
        if self.parents[0] != -1 or any(not 0 <= p < i for i, p in enumerate(self.parents) if i):
            raise ValueError("parents must list the root first and precede their children")
        if len(self.rest_dirs) != n - 1 or len(self.lengths) != n - 1:
            raise ValueError("one rest direction and one length per non-root joint")
        if any(l <= 0 for l in self.lengths):
            raise ValueError("segment lengths must be positive")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_segments(self) -> int:
        return len(self.parents) - 1

    def unit_rest_dirs(self) -> np.ndarray:
        d = np.asarray(self.rest_dirs, dtype=np.float64)
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass(frozen=True)
class CameraSpec:
    image_size: int = 56
    patch: int = 4
    px_per_unit: float = 10.0
    root_px: tuple[float, float] = (28.0, 27.0)  # (column, row)
    thickness: float = 0.9

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError("image size must be a multiple of the patch size")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid ** 2

    @property
    def token_dim(self) -> int:
        return self.patch ** 2 + 3


@dataclass(frozen=True)
class NoiseSpec:
    pixel_std: float = 0.03
    background_amp: float = 0.3


@dataclass(frozen=True)
class SynthScene:
    skeleton: Skeleton = field(default_factory=Skeleton)
    swing: tuple[float, ...] = DEFAULT_SWING
    yaw: float = 0.6
    camera: CameraSpec = field(default_factory=CameraSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    fps: float = 30.0
    seed: int = 0


def make_scene(seed: int, base: SynthScene | None = None, shape_jitter: float = 0.1) -> SynthScene:
    """Scene for one clip: the base scene with per-segment length jitter."""
    base = base or SynthScene()
    rng = np.random.default_rng([seed, 7])
    scale = rng.uniform(1 - shape_jitter, 1 + shape_jitter, base.skeleton.n_segments)
    lengths = tuple(float(l * s) for l, s in zip(base.skeleton.lengths, scale))
    return replace(base, skeleton=replace(base.skeleton, lengths=lengths), seed=seed)


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def forward_kinematics(skeleton: Skeleton, swing: np.ndarray, yaw: np.ndarray | float = 0.0) -> np.ndarray:
    """Joint positions for swing angles of shape (..., n_segments, 2).

    Segment k (ending at joint k+1) is rotated by Rz(a) Rx(b) relative to the
    frame of its parent segment; the root frame is a yaw about the vertical.
    """
    swing = np.asarray(swing, dtype=np.float64)
    batch = swing.shape[:-2]
    yaw = np.broadcast_to(np.asarray(yaw, dtype=np.float64), batch)
    rest = skeleton.unit_rest_dirs()
    lengths = np.asarray(skeleton.lengths)
    n = skeleton.n_joints
    rots = [None] * n
    rots[0] = _rot_y(yaw)
    joints = np.zeros(batch + (n, 3))
    local = _rot_z(swing[..., 0]) @ _rot_x(swing[..., 1])
    for j in range(1, n):
        p = skeleton.parents[j]
        rots[j] = rots[p] @ local[..., j - 1, :, :]
        joints[..., j, :] = joints[..., p, :] + lengths[j - 1] * (rots[j] @ rest[j - 1])
    return joints


def sample_trajectory(scene: SynthScene, n_frames: int, rng: np.random.Generator):
    """Smooth random swing angles (F, S, 2), roll angles (F, S) and yaw (F,)."""
    s = scene.skeleton.n_segments
    swing_amp = np.repeat(np.asarray(scene.swing, dtype=np.float64)[:, None], 2, axis=1)
    swing = _band_limited(rng, n_frames, scene.fps, swing_amp)
    roll = _band_limited(rng, n_frames, scene.fps, np.full(s, np.pi / 2))
    yaw = _band_limited(rng, n_frames, scene.fps, np.array([scene.yaw]))[:, 0]
    return swing, roll, yaw


def _band_limited(rng, n_frames, fps, amp, n_terms=3, fmin=0.25, fmax=1.25):
    amp = np.asarray(amp, dtype=np.float64)
    t = np.arange(n_frames) / fps
    out = np.broadcast_to(rng.uniform(-0.5, 0.5, amp.shape) * amp, (n_frames,) + amp.shape).copy()
    for _ in range(n_terms):
        f = rng.uniform(fmin, fmax, amp.shape)
        phase = rng.uniform(0, 2 * np.pi, amp.shape)
        a = rng.uniform(0.2, 1.0, amp.shape) * amp / n_terms
        out += a * np.sin(2 * np.pi * np.multiply.outer(t, f) + phase)
    return out


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class MaskGrid:
    pixels: np.ndarray  # (H, W) bool
    patch: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=bool)
        if px.ndim != 2 or px.shape[0] % self.patch or px.shape[1] % self.patch:
            raise ValueError(f"mask of shape {px.shape} is not tiled by {self.patch}px patches")
        object.__setattr__(self, "pixels", px)

    @property
    def grid(self) -> tuple[int, int]:
        return self.pixels.shape[0] // self.patch, self.pixels.shape[1] // self.patch


def _background(rng, camera: CameraSpec, amp: float) -> np.ndarray:
    n = camera.image_size
    yy, xx = np.mgrid[0:n, 0:n] / n
    img = np.zeros((n, n))
    for _ in range(3):
        k = rng.normal(0, 9.0, 2)
        img += rng.uniform(0.3, 1.0) * np.sin(k[0] * xx + k[1] * yy + rng.uniform(0, 2 * np.pi))
    return amp * img / 3.0


def rasterize(joints: np.ndarray, roll: np.ndarray, skeleton: Skeleton, camera: CameraSpec
              ) -> tuple[np.ndarray, np.ndarray]:
    """Stick-figure intensities and coverage mask for one frame.

    Pixel value encodes interpolated depth and the segment roll, so both are
    (weakly) observable from the image.
    """
    n = camera.image_size
    cy, cx = np.mgrid[0:n, 0:n] + 0.5
    pix = np.stack([cx.ravel(), cy.ravel()], axis=1)  # (P, 2) as (col, row)
    proj = np.stack([camera.root_px[0] + camera.px_per_unit * joints[:, 0],
                     camera.root_px[1] - camera.px_per_unit * joints[:, 1]], axis=1)
    child = np.arange(1, skeleton.n_joints)
    parent = np.asarray(skeleton.parents[1:])
    a, b = proj[parent], proj[child]  # (S, 2)
    ab = b - a
    denom = np.maximum((ab ** 2).sum(1), 1e-12)
    u = np.clip(((pix[:, None, :] - a[None]) * ab[None]).sum(-1) / denom, 0.0, 1.0)  # (P, S)
    closest = a[None] + u[..., None] * ab[None]
    dist = np.linalg.norm(pix[:, None, :] - closest, axis=-1)
    cover = dist <= camera.thickness
    depth = joints[parent, 2][None] + u * (joints[child, 2] - joints[parent, 2])[None]
    value = 0.6 + 0.25 * np.tanh(depth) + 0.15 * np.cos(roll)[None]
    front = np.where(cover, depth, -np.inf).argmax(axis=1)
    mask = cover.any(axis=1)
    img = np.take_along_axis(value, front[:, None], axis=1)[:, 0]
    return np.where(mask, img, 0.0).reshape(n, n), mask.reshape(n, n)


def patch_features(image: np.ndarray, patch: int) -> np.ndarray:
    """Per-patch token features: raw pixels, mean, mean |d/dx|, mean |d/dy|."""
    h, w = image.shape
    gy, gx = np.gradient(image)
    def tiles(a):
        return a.reshape(h // patch, patch, w // patch, patch).swapaxes(1, 2).reshape(-1, patch * patch)
    raw = tiles(image)
    return np.concatenate([raw, raw.mean(1, keepdims=True),
                           np.abs(tiles(gx)).mean(1, keepdims=True),
                           np.abs(tiles(gy)).mean(1, keepdims=True)], axis=1)


@dataclass
class SynthClip:
    clip: MotionClip
    features: np.ndarray  # (F, N, token_dim)
    masks: np.ndarray  # (F, H, W) bool
    lengths: np.ndarray  # (n_segments,) the clip's body "shape"
    patch: int
    seed: int = 0

    def mask(self, i: int) -> MaskGrid:
        return MaskGrid(self.masks[i], self.patch)

    def __len__(self) -> int:
        return len(self.clip)


def generate_clip(scene: SynthScene, n_frames: int) -> SynthClip:
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = np.random.default_rng([scene.seed, 11])
    swing, roll, yaw = sample_trajectory(scene, n_frames, rng)
    joints = forward_kinematics(scene.skeleton, swing, yaw)
    twists = np.stack([np.cos(roll), np.sin(roll)], axis=-1)
    background = _background(rng, scene.camera, scene.noise.background_amp)
    feats, masks = [], []
    for f in range(n_frames):
        fig, mask = rasterize(joints[f], roll[f], scene.skeleton, scene.camera)
        img = np.where(mask, fig, background) + rng.normal(0, scene.noise.pixel_std, mask.shape)
        feats.append(patch_features(img, scene.camera.patch))
        masks.append(mask)
    return SynthClip(MotionClip(joints, twists, scene.fps), np.stack(feats), np.stack(masks),
                     np.asarray(scene.skeleton.lengths), scene.camera.patch, scene.seed)


def bone_lengths(joints: np.ndarray, parents=DEFAULT_PARENTS) -> np.ndarray:
    child = np.arange(1, len(parents))
    return np.linalg.norm(joints[..., child, :] - joints[..., list(parents[1:]), :], axis=-1)


# ---------------------------------------------------------------------------
# resampling and augmentation


def _interp_rows(values: np.ndarray, times: np.ndarray):
    n = len(values)
    if n == 1:
        return np.repeat(values, len(times), axis=0), None, None
    i0 = np.clip(np.floor(times).astype(int), 0, n - 2)
    w = (times - i0).reshape((-1,) + (1,) * (values.ndim - 1))
    a, b = values[i0], values[i0 + 1]
    out = (1.0 - w) * a + w * b
    # keep sample points that land on a frame bit-exact
    out = np.where(w == 0.0, a, np.where(w == 1.0, b, out))
    return out, i0, w


def sample_clip_at(clip: MotionClip, times: np.ndarray) -> MotionClip:
    """Clip evaluated at fractional frame positions in [0, F-1]."""
    times = np.asarray(times, dtype=np.float64)
    joints, i0, w = _interp_rows(clip.joints, times)
    if i0 is None:
        return MotionClip(joints, np.repeat(clip.twists, len(times), axis=0), clip.fps)
    ang = np.arctan2(clip.twists[..., 1], clip.twists[..., 0])
    a0, a1 = ang[i0], ang[i0 + 1]
    delta = np.angle(np.exp(1j * (a1 - a0)))  # shortest arc
    w2 = w[..., 0]
    theta = a0 + w2 * delta
    twists = np.stack([np.cos(theta), np.sin(theta)], -1)
    twists = np.where((w2 == 0.0)[..., None], clip.twists[i0], twists)
    twists = np.where((w2 == 1.0)[..., None], clip.twists[i0 + 1], twists)
    return MotionClip(joints, twists, clip.fps)


def resample_times(n_from: int, n_to: int) -> np.ndarray:
    return np.linspace(0.0, n_from - 1, n_to)


def resample_clip(clip: MotionClip, n_frames: int) -> MotionClip:
    if n_frames < 1:
        raise ValueError("target frame count must be >= 1")
    if n_frames == len(clip):
        return MotionClip(clip.joints.copy(), clip.twists.copy(), clip.fps)
    return sample_clip_at(clip, resample_times(len(clip), n_frames))


def resample_rows(values: np.ndarray, n_frames: int) -> np.ndarray:
    """Linear resampling of per-frame rows (e.g. condition features)."""
    if n_frames == len(values):
        return values.copy()
    return _interp_rows(np.asarray(values), resample_times(len(values), n_frames))[0]


def warp_times(n_frames: int, rng: np.random.Generator, strength: float = 0.5) -> np.ndarray:
    """Monotone remap of [0, F-1] onto itself with both endpoints fixed."""
    if n_frames < 2:
        return np.zeros(n_frames)
    steps = rng.uniform(1.0 - strength, 1.0 + strength, n_frames - 1)
    t = np.concatenate([[0.0], np.cumsum(steps)])
    t = t * ((n_frames - 1) / t[-1])
    t[-1] = n_frames - 1.0
    return t


def augment(clip: MotionClip, p_reverse: float, p_warp: float, seed: int,
            features: np.ndarray | None = None):
    """Random time reversal and time warping.

    Returns the clip, or ``(clip, features)`` when per-frame features are
    given; features undergo the same time remap.
    """
    for p in (p_reverse, p_warp):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability {p} outside [0, 1]")
    rng = np.random.default_rng(seed)
    do_reverse = rng.random() < p_reverse
    do_warp = rng.random() < p_warp
    times = warp_times(len(clip), rng)
    out = clip
    feats = features
    if do_reverse:
        out = out.reversed()
        feats = None if feats is None else feats[::-1].copy()
    if do_warp:
        out = sample_clip_at(out, times)
        feats = None if feats is None else _interp_rows(feats, times)[0]
    if out is clip:
        out = MotionClip(clip.joints.copy(), clip.twists.copy(), clip.fps)
    if features is None:
        return out
    return out, (features.copy() if feats is features else feats)


# ---------------------------------------------------------------------------
# clip container


CLIP_KIND = "synth-clip"


def save_clip(path: str | Path, synth: SynthClip) -> Path:
    f, h, w = synth.masks.shape
    arrays = {
        "joints": synth.clip.joints,
        "twists": synth.clip.twists,
        "features": synth.features.astype(np.float32),
        "masks": np.packbits(synth.masks.reshape(f, -1), axis=1),
        "lengths": synth.lengths,
    }
    header = {"fps": synth.clip.fps, "patch": synth.patch, "image_shape": [h, w],
              "frames": f, "seed": synth.seed}
    return write_container(path, CLIP_KIND, header, arrays)


def load_clip(path: str | Path) -> SynthClip:
    header, arr = read_container(path, CLIP_KIND)
    h, w = header["image_shape"]
    f = header["frames"]
    masks = np.unpackbits(arr["masks"], axis=1, count=h * w).reshape(f, h, w).astype(bool)
    if arr["joints"].shape[0] != f or arr["features"].shape[0] != f:
        raise ValueError(f"{path}: frame counts disagree with header")
    return SynthClip(MotionClip(arr["joints"], arr["twists"], header["fps"]),
                     arr["features"].astype(np.float64), masks, arr["lengths"],
                     header["patch"], header["seed"])
