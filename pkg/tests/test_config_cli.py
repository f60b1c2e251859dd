import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from conftest import smoke_config
from hmrmerge.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from hmrmerge.config import ConfigError, ExperimentConfig
from hmrmerge.pipeline import STAGES, generate_dataset, layers_for, read_manifest


# ---------------------------------------------------------------------------
# config


def test_config_json_roundtrip(tmp_path):
    cfg = smoke_config(tmp_path / "out")
    path = cfg.save(tmp_path / "c.json")
    back = ExperimentConfig.load(path)
    assert back == cfg and back.fingerprint() == cfg.fingerprint()


def test_fingerprint_ignores_output_dir_only(tmp_path):
    a = smoke_config(tmp_path / "a")
    assert a.fingerprint() == a.replace(output_dir=str(tmp_path / "b")).fingerprint()
    assert a.fingerprint() != a.replace(eclm__tau=0.2).fingerprint()


def test_config_rejects_unknown_and_inconsistent(tmp_path):
    raw = smoke_config(tmp_path).to_dict()
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**raw, "extra": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**raw, "model": {**raw["model"], "colour": 1}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**raw, "model": {**raw["model"], "depth": 0}})
    with pytest.raises(ConfigError):
        smoke_config(tmp_path).replace(data__frames=12)
    with pytest.raises(ConfigError):
        smoke_config(tmp_path).replace(nosuch__field=1)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**raw, "schema_version": 99})
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "bad.json")


def test_layers_for_keeps_terminal_count():
    assert layers_for(196, 40, 90) == 3
    assert [layers_for(196, n, 90) for n in (10, 20, 60, 80, 100)] == [11, 6, 2, 2, 2]


# ---------------------------------------------------------------------------
# data generation


def test_gen_data_is_deterministic(tmp_path):
    cfg = smoke_config(tmp_path)
    a = generate_dataset(cfg, tmp_path / "a")
    b = generate_dataset(cfg, tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    man = read_manifest(tmp_path / "a")
    assert {k: len(v) for k, v in man["splits"].items()} == {"train": 6, "test": 2, "backbone": 12}
    with pytest.raises(FileExistsError):
        generate_dataset(cfg, tmp_path / "a")


def test_manifest_detects_tampering(tmp_path):
    cfg = smoke_config(tmp_path)
    generate_dataset(cfg, tmp_path / "d")
    victim = sorted((tmp_path / "d" / "test").glob("*.npz"))[0]
    victim.write_bytes(victim.read_bytes() + b"x")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "d")


# ---------------------------------------------------------------------------
# command line


def run_cli(args, capsys):
    code = main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_usage_errors_exit_1(capsys, tmp_path):
    assert run_cli(["no-such-command"], capsys)[0] == EXIT_CONFIG
    assert run_cli(["ablate", "wobble", "--output-dir", tmp_path], capsys)[0] == EXIT_CONFIG
    (tmp_path / "c.json").write_text('{"nonsense": 1}')
    code, _, err = run_cli(["gen-data", "--config", tmp_path / "c.json"], capsys)
    assert code == EXIT_CONFIG and "unknown config keys" in err


def test_init_config_and_refusal(capsys, tmp_path):
    path = tmp_path / "c.json"
    assert run_cli(["init-config", path], capsys)[0] == EXIT_OK
    assert ExperimentConfig.load(path) == ExperimentConfig()
    code, _, err = run_cli(["init-config", path], capsys)
    assert code == EXIT_RUNTIME and "--force" in err


def test_eval_without_models_is_runtime_error(capsys, tmp_path):
    cfg_path = smoke_config(tmp_path / "w").save(tmp_path / "c.json")
    assert run_cli(["gen-data", "--config", cfg_path], capsys)[0] == EXIT_OK
    code, _, err = run_cli(["eval", "--config", cfg_path], capsys)
    assert code == EXIT_RUNTIME and "missing trained models" in err


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    cfg_path = smoke_config(root / "work").save(root / "config.json")
    code = main(["pipeline", "--config", str(cfg_path)])
    return root, cfg_path, code


def test_pipeline_writes_stage_table_and_ledger(smoke_run):
    root, _, code = smoke_run
    assert code == EXIT_OK
    work = root / "work"
    rows = list(csv.DictReader((work / "seed_0" / "stages.csv").open()))
    assert [r["stage"] for r in rows] == list(STAGES)
    assert all(float(r["throughput"]) > 0 for r in rows)
    ledger = [json.loads(l) for l in (work / "ledger.jsonl").read_text().splitlines()]
    assert [r["stage"] for r in ledger] == list(STAGES)
    assert {r["status"] for r in ledger} == {"ok"}
    assert len({r["fingerprint"] for r in ledger}) == 1
    for name in ("backbone", "backbone_eclm", "vae", "denoiser"):
        assert (work / "seed_0" / "models" / f"{name}.npz").exists()


def test_cli_subcommands_on_trained_workspace(smoke_run, capsys):
    root, cfg_path, _ = smoke_run
    code, out, _ = run_cli(["eval", "--config", cfg_path, "--stage", "eclm"], capsys)
    assert code == EXIT_OK and out.splitlines()[1].startswith("eclm,")
    code, out, _ = run_cli(["bench", "--config", cfg_path, "--stage", "baseline", "--stage", "eclm",
                            "--repetitions", "2"], capsys)
    assert code == EXIT_OK and out.splitlines()[0] == "stage,threads,frames,fps,speedup"
    code, out, _ = run_cli(["compress", "--config", cfg_path, "--tau", "0.5"], capsys)
    fields = dict(line.split(",", 1) for line in out.splitlines()[1:])
    assert code == EXIT_OK and int(fields["exit_tokens"]) == 90
    code, out, _ = run_cli(["analyze-cka", "--config", cfg_path, "--frames", "8"], capsys)
    assert code == EXIT_OK and out.splitlines()[0] == "layer,0,1,2"
    code, _, _ = run_cli(["train-vae", "--config", cfg_path, "--seed", "7"], capsys)
    assert code == EXIT_CONFIG


def test_ablation_sweep(smoke_run, capsys):
    root, cfg_path, _ = smoke_run
    code, out, _ = run_cli(["ablate", "n_l", "--config", cfg_path, "--grid", "[40, 100]", "--no-timing"],
                           capsys)
    assert code == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["n_l"] for r in rows] == ["none", "40", "100"]
    assert [int(r["merge_layers"]) for r in rows] == [0, 3, 2]
    assert (root / "work" / "ablations" / "n_l.csv").exists()


def test_report_is_deterministic(smoke_run, capsys, tmp_path):
    root, cfg_path, _ = smoke_run
    code_a, _, _ = run_cli(["report", "--config", cfg_path, "--out", tmp_path / "a"], capsys)
    code_b, _, _ = run_cli(["report", "--config", cfg_path, "--out", tmp_path / "b"], capsys)
    assert code_a == code_b == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "throughput_vs_error.svg" in names and "summary.txt" in names
    for name in names:
        if name.endswith(".png"):
            continue  # raster output may embed backend details; the SVG/CSV carry the content
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "hmrmerge.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "pipeline" in out.stdout
