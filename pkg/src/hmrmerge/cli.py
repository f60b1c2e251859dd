"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.output_dir:
        cfg = cfg.replace(output_dir=args.output_dir)
    return cfg


def _say(msg: str) -> None:
    print(f"# {msg}", file=sys.stderr, flush=True)


def cmd_init_config(args, cfg):
    path = Path(args.path)
    if path.exists() and not args.force:
        raise FileExistsError(f"{path} exists; use --force to overwrite")
    cfg.save(path)
    print(path)


def cmd_gen_data(args, cfg):
    from .pipeline import Workspace, generate_dataset, read_manifest
    ws = Workspace.create(cfg)
    path = generate_dataset(cfg, ws.data_dir, force=args.force)
    manifest = read_manifest(ws.data_dir)
    print("split,clips,frames")
    for split, entries in manifest["splits"].items():
        print(f"{split},{len(entries)},{sum(e['frames'] for e in entries)}")
    _say(f"manifest {path}")


def _workspace(cfg, seed=None):
    from .pipeline import Workspace, read_manifest
    ws = Workspace.create(cfg, seed)
    read_manifest(ws.data_dir)
    return ws


def cmd_train_backbone(args, cfg):
    from .pipeline import stage_train_backbone
    ws = _workspace(cfg, args.seed)
    model = stage_train_backbone(ws)
    print(f"depth,{model.depth}\npath,{ws.model_path('backbone')}")


def cmd_train_vae(args, cfg):
    from .pipeline import stage_vae
    ws = _workspace(cfg, args.seed)
    _, info = stage_vae(ws)
    print("epoch,heldout_mpjpe")
    for i, v in enumerate(info["heldout_mpjpe"]):
        print(f"{i + 1},{v:.6g}")
    _say(f"trained in {info['seconds']:.1f}s; mean bone length {info['mean_bone']:.4f}")


def cmd_train_denoiser(args, cfg):
    from .pipeline import ensure_backbone, ensure_eclm, ensure_vae, stage_denoiser
    ws = _workspace(cfg, args.seed)
    merged = ensure_eclm(ws, ensure_backbone(ws))
    stage_denoiser(ws, ensure_vae(ws), merged, cfg.merge, objective=args.objective)
    print(f"path,{ws.model_path('denoiser')}")


def cmd_analyze_cka(args, cfg):
    from .pipeline import ensure_backbone, stage_cka
    ws = _workspace(cfg, args.seed)
    mat = stage_cka(ws, ensure_backbone(ws), frames=args.frames)
    n = len(mat.values)
    print("layer," + ",".join(str(i) for i in range(n)))
    for i, row in enumerate(mat.values):
        print(f"{i}," + ",".join(f"{v:.4f}" for v in row))


def cmd_compress(args, cfg):
    from .model import forward
    from .pipeline import ensure_backbone, person_tokens, stage_eclm
    from .token_merge import TokenState
    ws = _workspace(cfg, args.seed)
    tau = args.tau if args.tau is not None else cfg.eclm.tau
    merged, report = stage_eclm(ws, ensure_backbone(ws), tau=tau)
    ws.report_path("eclm.json").write_text(report.to_json() + "\n")
    # one frame's token-count trace through the merge schedule
    clip = ws.split("test")[0]
    out = forward(merged, TokenState.initial(clip.features[0], person_tokens(clip)[0]), cfg.merge)
    print("field,value")
    print(f"tau,{tau}\nlayers_before,{report.layers_before}\nlayers_after,{report.layers_after}")
    print(f"merged_ranges,\"{json.dumps(report.merged_ranges)}\"")
    print(f"base_error,{report.base_error:.6g}\nfinal_error,{report.final_error:.6g}")
    print(f"exit_tokens,{out.token_count}")


def _stage_models(ws, names):
    from .pipeline import StageModels, load_backbone, load_denoiser, load_vae
    need = {"baseline": ["backbone"], "eclm": ["backbone_eclm"], "eclm+tome": ["backbone_eclm"],
            "eclm+tome+diffusion": ["backbone_eclm", "vae", "denoiser"]}
    missing = sorted({m for n in names for m in need[n] if not ws.model_path(m).exists()})
    if missing:
        raise FileNotFoundError(f"missing trained models {missing} under {ws.run_dir}; run the training commands "
                                f"or 'pipeline' first")
    cache = {}
    def get(name, loader):
        if name not in cache:
            cache[name] = loader(ws.model_path(name))
        return cache[name]
    plan = ws.cfg.merge
    out = {}
    for n in names:
        if n == "baseline":
            out[n] = StageModels(get("backbone", load_backbone))
        elif n == "eclm":
            out[n] = StageModels(get("backbone_eclm", load_backbone))
        elif n == "eclm+tome":
            out[n] = StageModels(get("backbone_eclm", load_backbone), plan)
        else:
            out[n] = StageModels(get("backbone_eclm", load_backbone), plan, get("denoiser", load_denoiser),
                                 get("vae", load_vae))
    return out


def cmd_eval(args, cfg):
    from .pipeline import STAGE_COLUMNS, _ledger_row, _stage_row, bench_workload, evaluate_stage, format_table
    ws = _workspace(cfg, args.seed)
    names = args.stage or list(_all_stages())
    models = _stage_models(ws, names)
    test = ws.split("test")
    workload = bench_workload(ws, test) if args.timed else None
    rows = []
    for n in names:
        rep = evaluate_stage(ws, n, models[n], test, workload, timed=args.timed)
        ws.ledger.append(_ledger_row(ws, rep, note="eval"))
        rows.append(_stage_row(rep))
    sys.stdout.write(format_table(rows, STAGE_COLUMNS))


def cmd_bench(args, cfg):
    from .metrics import throughput
    from .pipeline import bench_workload, stage_runner
    ws = _workspace(cfg, args.seed)
    names = args.stage or list(_all_stages())
    models = _stage_models(ws, names)
    workload = bench_workload(ws, ws.split("test"))
    b = cfg.bench
    reps = args.repetitions or b.repetitions
    print("stage,threads,frames,fps,speedup")
    base = None
    for threads in args.threads or [b.threads]:
        for n in names:
            res = throughput(stage_runner(ws, models[n]), workload, reps, b.warmup, threads)
            if n == names[0]:
                base = res.fps
            print(f"{n},{threads},{res.frames},{res.fps:.2f},{res.fps / base:.3f}")


def cmd_ablate(args, cfg):
    from .pipeline import run_ablation
    grid = json.loads(args.grid) if args.grid else None
    _, table = run_ablation(cfg, args.knob, grid, timed=not args.no_timing, progress=_say)
    sys.stdout.write(table)


def cmd_report(args, cfg):
    from .report import build_report
    files = build_report(cfg.output_dir, args.out)
    print("artifact,path")
    for k, v in sorted(files.items()):
        print(f"{k},{v}")
    sys.stdout.write(Path(files["summary"]).read_text())


def cmd_pipeline(args, cfg):
    from .pipeline import run_pipeline
    for res in run_pipeline(cfg, force_data=args.force_data, progress=_say):
        sys.stdout.write(res.table)
        _say(f"merged layer ranges {res.eclm.merged_ranges}; {res.seconds:.0f}s")


def _all_stages():
    from .pipeline import STAGES
    return STAGES


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hmrmerge", description="Layer/token merging and latent-diffusion decoding on a toy "
                                             "pose-estimation backbone.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults are used when omitted)")
    common.add_argument("--output-dir", help="override the config's output directory")
    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int, default=None, help="run seed (default: first configured seed)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init-config", parents=[common], help="write the default config as JSON")
    s.add_argument("path")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_init_config)

    s = sub.add_parser("gen-data", parents=[common], help="generate synthetic clips and a manifest")
    s.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-backbone", parents=[common, seeded], help="train the baseline backbone")
    s.set_defaults(func=cmd_train_backbone)

    s = sub.add_parser("train-vae", parents=[common, seeded], help="pretrain the motion VAE")
    s.set_defaults(func=cmd_train_vae)

    s = sub.add_parser("train-denoiser", parents=[common, seeded],
                       help="train the latent denoiser on compressed-backbone features")
    s.add_argument("--objective", choices=["noise", "v", "both"], default=None)
    s.set_defaults(func=cmd_train_denoiser)

    s = sub.add_parser("analyze-cka", parents=[common, seeded], help="layer-by-layer CKA matrix")
    s.add_argument("--frames", type=int, default=32)
    s.set_defaults(func=cmd_analyze_cka)

    s = sub.add_parser("compress", parents=[common, seeded], help="run error-constrained layer merging")
    s.add_argument("--tau", type=float, default=None)
    s.set_defaults(func=cmd_compress)

    stage_help = "stage(s) to run; repeatable (default: all)"
    s = sub.add_parser("eval", parents=[common, seeded], help="evaluate trained stages on the test split")
    s.add_argument("--stage", action="append", choices=list(_all_stages()), help=stage_help)
    s.add_argument("--timed", action="store_true", help="also measure throughput")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common, seeded], help="throughput of trained stages")
    s.add_argument("--stage", action="append", choices=list(_all_stages()), help=stage_help)
    s.add_argument("--threads", type=int, action="append", help="thread count(s) to benchmark")
    s.add_argument("--repetitions", type=int, default=None)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("ablate", parents=[common], help="sweep one knob")
    s.add_argument("knob", help="tau | latent_size | objective | n_l | mask_onoff")
    s.add_argument("--grid", help="JSON list overriding the default grid")
    s.add_argument("--no-timing", action="store_true", help="skip throughput measurement")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", parents=[common], help="plots and summary from the ledger")
    s.add_argument("--out", help="output directory (default: <output-dir>/report)")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("pipeline", parents=[common], help="full chain: data, training, compression, evaluation")
    s.add_argument("--force-data", action="store_true", help="regenerate the dataset")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        if getattr(args, "seed", None) is not None and args.seed not in cfg.seeds:
            raise ConfigError(f"seed {args.seed} is not among the configured seeds {list(cfg.seeds)}")
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # reported, not re-raised: exit status carries the outcome
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
