"""End-to-end orchestration: dataset generation, training, compression,
evaluation, ablation sweeps and the append-only results ledger.

A workspace directory holds everything one configuration produces::

    config.json
    data/manifest.json, data/<split>/clip_00000.npz ...
    seed_0/models/*.npz, seed_0/reports/*, seed_0/stages.csv
    ledger.csv, ledger.jsonl
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import subprocess
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig
from .diffusion import (Denoiser, DenoiserData, build_schedule, load_denoiser, sample_latents,
                        save_denoiser, train_denoiser)
from .io import canonical_json, sha256_file
from .layer_merge import EclmConfig, EclmReport, analyze_cka, eclm_search, sample_calibration
from .metrics import EvalReport, SkinSpec, evaluate_clips, hardware_fingerprint, mpjpe, throughput
from .model import Backbone, load_backbone, predict_batch, save_backbone, train_backbone
from .pose import DEFAULT_PARENTS, SynthClip, augment, generate_clip, load_clip, make_scene, save_clip
from .token_merge import MergeSchedule, tokenize_mask
from .vae import MotionVAE, decode_flat, encode, load_vae, reconstruct, save_vae, train_vae

log = logging.getLogger(__name__)

STAGES = ("baseline", "eclm", "eclm+tome", "eclm+tome+diffusion")
SPLITS = ("train", "test", "backbone")
MANIFEST_VERSION = 1
LEDGER_FIELDS = ("fingerprint", "version", "seed", "stage", "status", "mpjpe", "pa_mpjpe", "pve",
                 "accel", "throughput", "layers", "tokens", "note", "timestamp")


class PipelineError(RuntimeError):
    """A stage failed; the ledger holds a failure record."""


def artifact_version() -> str:
    """Short git revision of the source tree, or the package version."""
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        from importlib.metadata import version
        return version("artifact")
    except Exception:  # not installed
        return "unknown"


# ---------------------------------------------------------------------------
# dataset


def scene_seed(data_seed: int, split: str, index: int) -> int:
    return int(np.random.SeedSequence([data_seed, SPLITS.index(split), index]).generate_state(1)[0])


def _split_sizes(cfg: ExperimentConfig) -> dict[str, tuple[int, int]]:
    d = cfg.data
    return {"train": (d.train_clips, d.frames), "test": (d.test_clips, d.frames),
            "backbone": (d.backbone_clips, d.backbone_frames)}


def generate_dataset(cfg: ExperimentConfig, root: str | Path, force: bool = False) -> Path:
    """Write every split's clips and a manifest with checksums; returns the manifest path."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists; pass force to overwrite")
    splits = {}
    for split, (count, frames) in _split_sizes(cfg).items():
        entries = []
        for i in range(count):
            seed = scene_seed(cfg.data.seed, split, i)
            clip = generate_clip(make_scene(seed, shape_jitter=cfg.data.shape_jitter), frames)
            rel = f"{split}/clip_{i:05d}.npz"
            save_clip(root / rel, clip)
            entries.append({"file": rel, "frames": frames, "scene_seed": seed,
                            "sha256": sha256_file(root / rel)})
        splits[split] = entries
    manifest = {"manifest_version": MANIFEST_VERSION, "data": asdict(cfg.data),
                "tokens_per_frame": cfg.model.tokens_per_frame, "splits": splits}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path


def read_manifest(root: str | Path, verify: bool = True) -> dict:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}; run gen-data first")
    manifest = json.loads(path.read_text())
    if verify:
        bad = [e["file"] for entries in manifest["splits"].values() for e in entries
               if not (root / e["file"]).exists() or sha256_file(root / e["file"]) != e["sha256"]]
        if bad:
            raise ValueError(f"checksum mismatch for {len(bad)} clip(s), first: {bad[0]}")
    return manifest


def load_split(root: str | Path, split: str, manifest: dict | None = None) -> list[SynthClip]:
    manifest = manifest or read_manifest(root, verify=False)
    return [load_clip(Path(root) / e["file"]) for e in manifest["splits"][split]]


def person_tokens(clip: SynthClip) -> np.ndarray:
    """(F, N) person bits for every frame of a clip."""
    return np.stack([tokenize_mask(clip.mask(i)) for i in range(len(clip))])


# ---------------------------------------------------------------------------
# ledger


@dataclass
class RunLedger:
    """Append-only CSV plus JSON-lines record of evaluation results."""

    root: Path

    @property
    def csv_path(self) -> Path:
        return Path(self.root) / "ledger.csv"

    @property
    def jsonl_path(self) -> Path:
        return Path(self.root) / "ledger.jsonl"

    def append(self, record: dict) -> None:
        row = {k: record.get(k, "") for k in LEDGER_FIELDS}
        row["timestamp"] = row["timestamp"] or datetime.now(timezone.utc).isoformat(timespec="seconds")
        Path(self.root).mkdir(parents=True, exist_ok=True)
        new = not self.csv_path.exists()
        with self.csv_path.open("a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LEDGER_FIELDS)
            if new:
                w.writeheader()
            w.writerow(row)
        with self.jsonl_path.open("a") as fh:
            fh.write(json.dumps({**record, "timestamp": row["timestamp"]}, sort_keys=True) + "\n")

    def records(self) -> list[dict]:
        if not self.jsonl_path.exists():
            return []
        return [json.loads(line) for line in self.jsonl_path.read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# workspace and stages


@dataclass
class Workspace:
    cfg: ExperimentConfig
    root: Path
    seed: int = 0

    @classmethod
    def create(cls, cfg: ExperimentConfig, seed: int | None = None) -> "Workspace":
        root = Path(cfg.output_dir)
        root.mkdir(parents=True, exist_ok=True)
        cfg.save(root / "config.json")
        return cls(cfg, root, cfg.seeds[0] if seed is None else seed)

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def run_dir(self) -> Path:
        return self.root / f"seed_{self.seed}"

    def model_path(self, name: str) -> Path:
        return self.run_dir / "models" / f"{name}.npz"

    def report_path(self, name: str) -> Path:
        p = self.run_dir / "reports" / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def ledger(self) -> RunLedger:
        return RunLedger(self.root)

    def split(self, name: str) -> list[SynthClip]:
        return load_split(self.data_dir, name)


def stage_train_backbone(ws: Workspace) -> Backbone:
    cfg = ws.cfg
    clips = ws.split("backbone")
    tokens = np.concatenate([c.features for c in clips])
    poses = np.concatenate([c.clip.flat() for c in clips])
    shapes = np.concatenate([np.repeat(c.lengths[None], len(c), 0) for c in clips])
    model = Backbone(replace(cfg.model, seed=cfg.model.seed + ws.seed))
    t = cfg.train
    logbook = train_backbone(model, tokens, poses, shapes, epochs=t.backbone_epochs, lr=t.backbone_lr,
                             batch=t.backbone_batch, seed=ws.seed, layer_drop=t.layer_drop)
    save_backbone(model, ws.model_path("backbone"))
    ws.report_path("backbone_loss.csv").write_text(
        "epoch,loss\n" + "".join(f"{i + 1},{l:.8g}\n" for i, l in enumerate(logbook.losses)))
    log.info("backbone trained in %.1fs", logbook.seconds)
    return model


def ensure_backbone(ws: Workspace) -> Backbone:
    path = ws.model_path("backbone")
    return load_backbone(path) if path.exists() else stage_train_backbone(ws)


def stage_cka(ws: Workspace, model: Backbone, frames: int = 32):
    test = ws.split("test")
    tokens = np.concatenate([c.features for c in test])
    idx = np.linspace(0, len(tokens) - 1, min(frames, len(tokens))).round().astype(int)
    mat = analyze_cka(model, tokens[idx])
    mat.to_csv(ws.report_path("cka.csv"))
    mat.to_pgm(ws.report_path("cka.pgm"))
    return mat


def calibration_set(ws: Workspace) -> tuple[np.ndarray, np.ndarray]:
    """(tokens, joints) drawn evenly from the training clips."""
    clips = ws.split("train")
    total = ws.cfg.eclm.calibration_frames
    per_clip = max(1, math.ceil(total / len(clips)))
    picks = sample_calibration([len(c) for c in clips], per_clip, seed=ws.seed)
    tokens = np.concatenate([c.features[i] for c, i in zip(clips, picks)])[:total]
    joints = np.concatenate([c.clip.joints[i] for c, i in zip(clips, picks)])[:total]
    return tokens, joints


def stage_eclm(ws: Workspace, model: Backbone, tau: float | None = None, save: bool = True
               ) -> tuple[Backbone, EclmReport]:
    ecfg = ws.cfg.eclm if tau is None else replace(ws.cfg.eclm, tau=tau)
    tokens, joints = calibration_set(ws)
    merged, report = eclm_search(model, ecfg, tokens, joints)
    if save:
        save_backbone(merged, ws.model_path("backbone_eclm"))
        ws.report_path("eclm.json").write_text(report.to_json() + "\n")
    return merged, report


def ensure_eclm(ws: Workspace, model: Backbone) -> Backbone:
    path = ws.model_path("backbone_eclm")
    return load_backbone(path) if path.exists() else stage_eclm(ws, model)[0]


def clip_features(model: Backbone, clips: Sequence[SynthClip], plan: MergeSchedule | None
                  ) -> list[np.ndarray]:
    """Per-clip (F, D_F) backbone features."""
    out = []
    for c in clips:
        person = person_tokens(c) if plan is not None else None
        feats, _ = predict_batch(model, c.features, person, plan)
        out.append(feats)
    return out


def _heldout_error(vae: MotionVAE, clips) -> float:
    rec = reconstruct(vae, [c.clip for c in clips])
    return mpjpe(np.stack([r.joints for r in rec]), np.stack([c.clip.joints for c in clips]))


def stage_vae(ws: Workspace, cfg_override=None) -> tuple[MotionVAE, dict]:
    cfg = ws.cfg
    vcfg = cfg_override or replace(cfg.vae, seed=cfg.vae.seed + ws.seed)
    train, test = ws.split("train"), ws.split("test")
    vae = MotionVAE(vcfg)
    heldout: list[float] = []
    vae, logbook = train_vae(vae, [c.clip for c in train], epochs=cfg.train.vae_epochs, lr=cfg.train.vae_lr,
                             batch=cfg.train.vae_batch, seed=ws.seed,
                             callback=lambda e, m: heldout.append(_heldout_error(m, test)))
    info = {"seconds": logbook.seconds, "heldout_mpjpe": heldout, "train_mse": logbook.mse,
            "final_heldout": heldout[-1] if heldout else _heldout_error(vae, test),
            "mean_bone": float(np.mean([c.lengths.mean() for c in train]))}
    if cfg_override is None:
        save_vae(vae, ws.model_path("vae"))
        logbook.to_csv(ws.report_path("vae_loss.csv"))
        ws.report_path("vae_heldout.json").write_text(json.dumps(info, indent=1) + "\n")
    return vae, info


def ensure_vae(ws: Workspace) -> MotionVAE:
    path = ws.model_path("vae")
    return load_vae(path) if path.exists() else stage_vae(ws)[0]


def denoiser_data_fn(ws: Workspace, vae: MotionVAE, clips: Sequence[SynthClip], feats: Sequence[np.ndarray]
                     ) -> Callable[[int], DenoiserData]:
    """Per-epoch training pairs with random time reversal / warping."""
    p = ws.cfg.train.augment_p

    def make(epoch: int) -> DenoiserData:
        poses, conds = [], []
        for i, (c, f) in enumerate(zip(clips, feats)):
            if epoch == 0 or p == 0:
                poses.append(c.clip)
                conds.append(f)
                continue
            seed = int(np.random.SeedSequence([ws.seed, epoch, i]).generate_state(1)[0])
            clip, cond = augment(c.clip, p, p, seed, features=f)
            poses.append(clip)
            conds.append(cond)
        return DenoiserData(encode(vae, poses).mean, np.stack(conds))

    return make


def stage_denoiser(ws: Workspace, vae: MotionVAE, model: Backbone, plan: MergeSchedule | None,
                   objective: str | None = None, save: bool = True, dcfg=None) -> Denoiser:
    cfg = ws.cfg
    train = ws.split("train")
    feats = clip_features(model, train, plan)
    schedule = build_schedule(cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end,
                              cfg.diffusion.kind, cfg.diffusion.zero_terminal)
    dcfg = dcfg or replace(cfg.denoiser, seed=cfg.denoiser.seed + ws.seed)
    objective = objective or cfg.diffusion.objective
    # noise prediction means a network that outputs the noise, not a reweighted v loss
    dcfg = replace(dcfg, prediction="eps" if objective == "noise" else "v")
    den = Denoiser(dcfg)
    den, logbook = train_denoiser(den, schedule, denoiser_data_fn(ws, vae, train, feats),
                                  epochs=cfg.train.denoiser_epochs, lr=cfg.train.denoiser_lr,
                                  batch=cfg.train.denoiser_batch, seed=ws.seed,
                                  objective=objective)
    if save:
        save_denoiser(den, ws.model_path("denoiser"))
        logbook.to_csv(ws.report_path("denoiser_loss.csv"))
    return den


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class StageModels:
    """Everything a stage needs for inference."""

    backbone: Backbone
    plan: MergeSchedule | None = None
    denoiser: Denoiser | None = None
    vae: MotionVAE | None = None


def predict_clips(ws: Workspace, stage: StageModels, clips: Sequence[SynthClip]) -> list[np.ndarray]:
    """Predicted (F, J, 3) joints per clip."""
    nj = stage.backbone.cfg.n_joints
    out = []
    d = ws.cfg.diffusion
    schedule = build_schedule(d.T, d.beta_start, d.beta_end, d.kind, d.zero_terminal) if stage.denoiser else None
    for i, c in enumerate(clips):
        person = person_tokens(c) if stage.plan is not None else None
        feats, raw = predict_batch(stage.backbone, c.features, person, stage.plan)
        if stage.denoiser is None:
            out.append(raw[:, : 3 * nj].reshape(-1, nj, 3))
            continue
        z = sample_latents(stage.denoiser, schedule, feats[None], d.sample_steps, seed=ws.seed * 100003 + i)
        flat = decode_flat(stage.vae, z)[0]
        out.append(flat[:, : 3 * nj].reshape(-1, nj, 3))
    return out


def _fast_copy(model):
    return copy.deepcopy(model).float().eval()


def stage_runner(ws: Workspace, stage: StageModels) -> Callable:
    """Inference closure over float32 copies, for throughput timing."""
    bb = _fast_copy(stage.backbone)
    plan = stage.plan
    den = stage.denoiser
    vae = stage.vae
    d = ws.cfg.diffusion
    schedule = build_schedule(d.T, d.beta_start, d.beta_end, d.kind, d.zero_terminal) if den else None

    def run(batch):
        tokens, person = batch
        feats = bb.features(tokens, person if plan is not None else None, plan)
        if den is None:
            return bb.pose_vectors(feats)
        z = sample_latents(den, schedule, feats[None], d.sample_steps)
        return decode_flat(vae, z)

    return run


def bench_workload(ws: Workspace, clips: Sequence[SynthClip]) -> list:
    chosen = clips[: ws.cfg.bench.clips]
    return [_Batch(torch.as_tensor(c.features, dtype=torch.float32), torch.as_tensor(person_tokens(c)))
            for c in chosen]


class _Batch(tuple):
    """(tokens, person) pair whose len() counts frames."""

    def __new__(cls, tokens, person):
        return super().__new__(cls, (tokens, person))

    def __len__(self):
        return len(self[0])


def evaluate_stage(ws: Workspace, name: str, stage: StageModels, clips: Sequence[SynthClip],
                   workload: list | None = None, timed: bool = True) -> EvalReport:
    preds = predict_clips(ws, stage, clips)
    truths = [c.clip.joints for c in clips]
    skin = SkinSpec.segments(DEFAULT_PARENTS)
    fps = 0.0
    if timed:
        b = ws.cfg.bench
        res = throughput(stage_runner(ws, stage), workload or bench_workload(ws, clips), b.repetitions,
                         b.warmup, b.threads)
        fps = res.fps
    tokens = stage.backbone.cfg.tokens_per_frame
    if stage.plan is not None:
        tokens -= sum(_plan_counts(stage.plan, tokens))
    extra = {"layers": stage.backbone.depth, "tokens": tokens}
    return evaluate_clips(preds, truths, skin, throughput=fps, fingerprint=ws.cfg.fingerprint(),
                          stage=name, extra=extra)


def _plan_counts(plan: MergeSchedule, n: int) -> list[int]:
    counts, cur = [], n
    for _ in range(plan.layers):
        k = max(0, min(plan.per_layer, cur - plan.floor))
        counts.append(k)
        cur -= k
    return counts


def _ledger_row(ws: Workspace, report: EvalReport, status: str = "ok", note: str = "") -> dict:
    return {"fingerprint": ws.cfg.fingerprint(), "version": artifact_version(), "seed": ws.seed,
            "stage": report.stage, "status": status, "mpjpe": report.mpjpe, "pa_mpjpe": report.pa_mpjpe,
            "pve": report.pve, "accel": report.accel, "throughput": report.throughput,
            "layers": report.extra.get("layers", ""), "tokens": report.extra.get("tokens", ""),
            "note": note, "hardware": hardware_fingerprint(ws.cfg.bench.threads)}


STAGE_COLUMNS = ("stage", "layers", "tokens", "mpjpe", "pa_mpjpe", "pve", "accel", "throughput")


def format_table(rows: Sequence[dict], columns: Sequence[str], delimiter: str = ",") -> str:
    def fmt(v):
        return f"{v:.6g}" if isinstance(v, float) else str(v)
    lines = [delimiter.join(columns)]
    lines += [delimiter.join(fmt(r.get(c, "")) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"


def _stage_row(report: EvalReport) -> dict:
    return {"stage": report.stage, "layers": report.extra["layers"], "tokens": report.extra["tokens"],
            "mpjpe": report.mpjpe, "pa_mpjpe": report.pa_mpjpe, "pve": report.pve, "accel": report.accel,
            "throughput": report.throughput}


@dataclass
class PipelineResult:
    reports: list[EvalReport]
    eclm: EclmReport
    vae_info: dict
    seconds: float
    table: str


def run_pipeline(cfg: ExperimentConfig, force_data: bool = False, progress: Callable[[str], None] | None = None
                 ) -> list[PipelineResult]:
    """Full chain for every configured seed; returns one result per seed."""
    say = progress or (lambda msg: log.info(msg))
    ws0 = Workspace.create(cfg)
    if force_data or not (ws0.data_dir / "manifest.json").exists():
        say("generating data")
        generate_dataset(cfg, ws0.data_dir, force=force_data)
    else:
        read_manifest(ws0.data_dir)
    results = []
    for seed in cfg.seeds:
        ws = Workspace(cfg, ws0.root, seed)
        results.append(_run_seed(ws, say))
    return results


def _run_seed(ws: Workspace, say) -> PipelineResult:
    t0 = time.perf_counter()
    stage = "backbone"
    reports: list[EvalReport] = []
    try:
        say(f"[seed {ws.seed}] training backbone")
        base = stage_train_backbone(ws)
        stage = "cka"
        stage_cka(ws, base)
        stage = "eclm"
        say(f"[seed {ws.seed}] layer merging")
        merged, eclm_report = stage_eclm(ws, base)
        say(f"[seed {ws.seed}] merged ranges {eclm_report.merged_ranges}")
        stage = "vae"
        say(f"[seed {ws.seed}] training VAE")
        vae, vae_info = stage_vae(ws)
        stage = "denoiser"
        say(f"[seed {ws.seed}] training denoiser")
        plan = ws.cfg.merge
        den = stage_denoiser(ws, vae, merged, plan)
        test = ws.split("test")
        workload = bench_workload(ws, test)
        configs = {"baseline": StageModels(base), "eclm": StageModels(merged),
                   "eclm+tome": StageModels(merged, plan),
                   "eclm+tome+diffusion": StageModels(merged, plan, den, vae)}
        for name in STAGES:
            stage = name
            say(f"[seed {ws.seed}] evaluating {name}")
            rep = evaluate_stage(ws, name, configs[name], test, workload)
            reports.append(rep)
            ws.ledger.append(_ledger_row(ws, rep))
    except Exception as exc:
        ws.ledger.append({"fingerprint": ws.cfg.fingerprint(), "version": artifact_version(), "seed": ws.seed,
                          "stage": stage, "status": "failed", "note": f"{type(exc).__name__}: {exc}"})
        raise PipelineError(f"stage '{stage}' failed: {exc}") from exc
    table = format_table([_stage_row(r) for r in reports], STAGE_COLUMNS)
    (ws.run_dir / "stages.csv").write_text(table)
    (ws.run_dir / "stages.json").write_text(json.dumps([r.to_dict() for r in reports], indent=1) + "\n")
    return PipelineResult(reports, eclm_report, vae_info, time.perf_counter() - t0, table)


# ---------------------------------------------------------------------------
# ablations

ABLATION_GRIDS = {
    "tau": [1.0, 0.5, 0.3, 0.2, 0.1],
    "latent_size": [(1, 16), (1, 32), (1, 64), (4, 32)],
    "objective": ["noise", "v", "both"],
    "n_l": [10, 20, 40, 60, 80, 100],
    "mask_onoff": [(False, False), (False, True), (True, False), (True, True)],
}


def layers_for(n_tokens: int, per_layer: int, floor: int) -> int:
    """Merging layers needed to reach ``floor`` tokens at ``per_layer`` per layer."""
    return max(1, math.ceil((n_tokens - floor) / per_layer))


def run_ablation(cfg: ExperimentConfig, knob: str, grid: Sequence | None = None, timed: bool = True,
                 progress: Callable[[str], None] | None = None) -> tuple[list[dict], str]:
    """Sweep one knob; returns (rows, CSV text).  Trains missing artifacts."""
    if knob not in ABLATION_GRIDS:
        raise ConfigError(f"unknown ablation knob {knob!r}; valid knobs: {', '.join(ABLATION_GRIDS)}")
    say = progress or (lambda msg: log.info(msg))
    grid = list(ABLATION_GRIDS[knob] if grid is None else grid)
    ws = Workspace.create(cfg)
    if not (ws.data_dir / "manifest.json").exists():
        generate_dataset(cfg, ws.data_dir)
    base = ensure_backbone(ws)
    test = ws.split("test")
    workload = bench_workload(ws, test) if timed else None
    plan = cfg.merge
    rows: list[dict] = []

    def record(rep: EvalReport, row: dict):
        row.update({"mpjpe": rep.mpjpe, "pa_mpjpe": rep.pa_mpjpe, "pve": rep.pve, "accel": rep.accel,
                    "throughput": rep.throughput, "layers": rep.extra["layers"]})
        rows.append(row)
        ws.ledger.append(_ledger_row(ws, rep, note=f"ablate {knob}={row[knob]}"))

    if knob == "tau":
        for tau in grid:
            say(f"tau={tau}")
            merged, report = stage_eclm(ws, base, tau=tau, save=False)
            rep = evaluate_stage(ws, "eclm", StageModels(merged), test, workload, timed)
            record(rep, {"tau": tau, "merged": json.dumps(report.merged_ranges)})
        columns = ("tau", "layers", "merged", "mpjpe", "pa_mpjpe", "throughput")
    elif knob == "n_l":
        merged = ensure_eclm(ws, base)
        rep = evaluate_stage(ws, "eclm", StageModels(merged), test, workload, timed)
        record(rep, {"n_l": "none", "merge_layers": 0})
        n = cfg.model.tokens_per_frame
        for n_l in grid:
            say(f"n_l={n_l}")
            p = replace(plan, per_layer=n_l, layers=layers_for(n, n_l, plan.floor))
            rep = evaluate_stage(ws, "eclm+tome", StageModels(merged, p), test, workload, timed)
            record(rep, {"n_l": n_l, "merge_layers": p.layers})
        columns = ("n_l", "merge_layers", "mpjpe", "pa_mpjpe", "throughput")
    else:
        merged = ensure_eclm(ws, base)
        vae = ensure_vae(ws)
        if knob == "objective":
            for obj in grid:
                say(f"objective={obj}")
                den = stage_denoiser(ws, vae, merged, plan, objective=obj, save=False)
                rep = evaluate_stage(ws, "eclm+tome+diffusion", StageModels(merged, plan, den, vae), test,
                                     workload, timed)
                record(rep, {"objective": obj})
            columns = ("objective", "mpjpe", "pa_mpjpe", "pve", "accel")
        elif knob == "latent_size":
            for nz, dz in grid:
                say(f"latent={nz}x{dz}")
                vcfg = replace(cfg.vae, latent_tokens=nz, latent_dim=dz, seed=cfg.vae.seed + ws.seed)
                v, info = stage_vae(ws, cfg_override=vcfg)
                dcfg = replace(cfg.denoiser, latent_tokens=nz, latent_dim=dz, seed=cfg.denoiser.seed + ws.seed)
                den = stage_denoiser(ws, v, merged, plan, save=False, dcfg=dcfg)
                rep = evaluate_stage(ws, "eclm+tome+diffusion", StageModels(merged, plan, den, v), test,
                                     workload, timed)
                record(rep, {"latent_size": f"{nz}x{dz}", "reconstruction": info["final_heldout"]})
            columns = ("latent_size", "reconstruction", "mpjpe")
        else:  # mask_onoff
            dens = {}
            for use_mask, diffusion in grid:
                say(f"mask={use_mask} diffusion={diffusion}")
                p = replace(plan, use_mask=use_mask)
                den = None
                if diffusion:
                    if use_mask not in dens:
                        dens[use_mask] = stage_denoiser(ws, vae, merged, p, save=False)
                    den = dens[use_mask]
                stage_name = "eclm+tome+diffusion" if diffusion else "eclm+tome"
                rep = evaluate_stage(ws, stage_name, StageModels(merged, p, den, vae if diffusion else None),
                                     test, workload, timed)
                record(rep, {"mask_onoff": f"mask={'on' if use_mask else 'off'}"
                                           f"{' +diffusion' if diffusion else ''}"})
            columns = ("mask_onoff", "pa_mpjpe", "mpjpe", "pve")
    table = format_table(rows, columns)
    out = ws.root / "ablations" / f"{knob}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table)
    return rows, table
