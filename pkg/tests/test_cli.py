import hashlib
import json

import pytest
import yaml

from segadapt import cli
from segadapt.config import SchemaError, from_dict, validate
from segadapt.domains import build_benchmark

TINY = {
    "benchmark": {"image_size": [32, 32], "train_size": 6, "eval_size": 4},
    "mtstn": {"epochs": 1, "steps_per_epoch": 2, "style_dim": 8, "blocks": 1, "base_width": 4, "disc_width": 4},
    "method": {
        "mode": "utkd",
        "pretrain": {"iterations": 4, "warmup": 2, "log_every": 1, "style_transfer": True},
        "adapt": {"iterations": 3, "log_every": 1},
    },
    "output": {"dir": "unused", "overlays": 1},
}


def _write(tmp_path, raw, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def _run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def utkd_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("utkd")
    cfg = _write(tmp, TINY)
    assert _run("run-setting", cfg, "--out", tmp / "a", "--seed", "1") == 0
    return tmp, cfg


def test_missing_key_names_path(tmp_path, capsys):
    raw = {k: v for k, v in TINY.items() if k != "output"}
    assert _run("run-setting", _write(tmp_path, raw)) == cli.EXIT_CONFIG
    assert "output: required key is missing" in capsys.readouterr().err
    raw = {**TINY, "method": {"pretrain": {}}}
    assert _run("run-setting", _write(tmp_path, raw)) == cli.EXIT_CONFIG
    assert "method.mode" in capsys.readouterr().err


def test_unknown_and_bad_values():
    with pytest.raises(SchemaError) as exc:
        validate({**TINY, "method": {"mode": "utkd", "pretrain": {"lamda_con": 1}}})
    assert exc.value.path == "method.pretrain.lamda_con"
    with pytest.raises(SchemaError) as exc:
        validate({**TINY, "method": {"mode": "utkd", "adapt": {"alpha": 2}}})
    assert exc.value.path == "method.adapt.alpha"
    with pytest.raises(SchemaError):
        validate({**TINY, "method": {"mode": "semi"}})


def test_adapt_defaults_to_pretrain_section():
    raw = {**TINY, "method": {"mode": "utkd", "pretrain": {"iterations": 4, "warmup": 0, "alpha": 0.9}}}
    cfg = from_dict(raw)
    assert cfg.adapt.alpha == 0.9 and cfg.adapt.iterations == 4


def test_run_setting_outputs(utkd_run):
    tmp, _ = utkd_run
    run = tmp / "a"
    for name in ("config.yaml", "metrics.csv", "table.txt", "manifest.json", "mtkd.ckpt", "utkd.ckpt",
                 "mtstn.ckpt", "history_mtkd.csv", "history_utkd.csv", "curves_mtkd.png", "reads.json"):
        assert (run / name).exists(), name
    assert list((run / "overlays").glob("*.png"))
    manifest = json.loads((run / "manifest.json").read_text())
    for rel, digest in manifest["files"].items():
        assert hashlib.sha256((run / rel).read_bytes()).hexdigest() == digest
    reads = json.loads((run / "reads.json").read_text())
    assert list(reads["adapt"]) == ["grain/train"]
    snap = yaml.safe_load((run / "config.yaml").read_text())
    assert snap["method"]["pretrain"]["seed"] == 1 and snap["method"]["adapt"]["lambda_con"] == 100.0


def test_rerun_is_byte_identical(utkd_run):
    tmp, cfg = utkd_run
    assert _run("run-setting", cfg, "--out", tmp / "b", "--seed", "1") == 0
    a, b = tmp / "a", tmp / "b"
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "history_utkd.csv").read_bytes() == (b / "history_utkd.csv").read_bytes()


def test_resume_reuses_stages(utkd_run):
    tmp, cfg = utkd_run
    before = (tmp / "a" / "mtkd.ckpt").stat().st_mtime_ns
    assert _run("run-setting", cfg, "--out", tmp / "a", "--seed", "1", "--resume") == 0
    assert (tmp / "a" / "mtkd.ckpt").stat().st_mtime_ns == before
    first = (tmp / "b" / "metrics.csv").read_bytes()
    assert (tmp / "a" / "metrics.csv").read_bytes() == first


def test_evaluate_reproduces_logged_metrics(utkd_run):
    tmp, cfg = utkd_run
    out = tmp / "eval"
    assert _run("evaluate", cfg, "--out", out, "--checkpoint", tmp / "a" / "utkd.ckpt", "--name", "utkd") == 0
    logged = {r.method: r for r in cli.read_csv(str(tmp / "a" / "metrics.csv"))}["utkd"]
    again = cli.read_csv(str(out / "metrics.csv"))[0]
    assert [r.miou for r in again.results] == [r.miou for r in logged.results]


def test_evaluate_missing_component(utkd_run, capsys):
    tmp, cfg = utkd_run
    code = _run("evaluate", cfg, "--out", tmp / "e2", "--checkpoint", tmp / "a" / "utkd.ckpt", "--component", "d_out")
    assert code == cli.EXIT_IO
    assert "manifest mismatch" in capsys.readouterr().err


def test_compare_against_itself(utkd_run, capsys):
    tmp, _ = utkd_run
    assert _run("compare", tmp / "a", "--baseline", "utkd", "--out", tmp / "cmp") == 0
    text = (tmp / "cmp" / "comparison.txt").read_text()
    line = [ln for ln in text.splitlines() if ln.startswith("utkd ")][-1]
    assert line.split()[3] == "+0.0"
    assert "mtkd_direct" in text


def test_compare_missing_run(tmp_path):
    assert _run("compare", tmp_path / "nope", "--baseline", "x") == cli.EXIT_IO


def test_adapt_utkd_from_checkpoint(utkd_run):
    tmp, cfg = utkd_run
    out = tmp / "adapt"
    assert _run("adapt-utkd", cfg, "--out", out, "--seed", "1", "--checkpoint", tmp / "a" / "mtkd.ckpt") == 0
    assert (out / "metrics.csv").read_bytes() == (tmp / "a" / "metrics.csv").read_bytes()


def test_adapt_utkd_needs_checkpoint(tmp_path):
    assert _run("adapt-utkd", _write(tmp_path, TINY), "--out", tmp_path / "x") == cli.EXIT_CONFIG


def test_isolation_violation_exit_code(tmp_path, monkeypatch, capsys):
    def leaky(config):
        bench = build_benchmark(config)
        honest = bench.unseen.train.images

        def images(idx=None):
            bench.source.train.images([0])
            return honest(idx)

        bench.unseen.train.images = images
        return bench

    monkeypatch.setattr(cli, "build_benchmark", leaky)
    assert _run("run-setting", _write(tmp_path, TINY), "--out", tmp_path / "x") == cli.EXIT_ISOLATION
    assert "isolation violation" in capsys.readouterr().err


def test_numeric_abort_exit_code(tmp_path):
    raw = {**TINY, "method": {"mode": "no_adaptation", "pretrain": {"iterations": 30, "warmup": 0, "lr": 1e30}}}
    assert _run("run-setting", _write(tmp_path, raw), "--out", tmp_path / "x") == cli.EXIT_NUMERIC


def test_ablate_writes_sweep(tmp_path):
    raw = {**TINY, "sweep": {"lambda_con": [0.0, 100.0]}}
    out = tmp_path / "abl"
    assert _run("ablate", _write(tmp_path, raw), "lambda_con", "--out", out) == 0
    rows = (out / "ablation_lambda_con.csv").read_text().splitlines()
    assert rows[0].startswith("lambda_con,avg") and len(rows) == 3
    assert (out / "ablation_lambda_con.png").exists()
    # the pretraining stage is shared by both sweep points
    assert (out / "mtkd.ckpt").exists() and not (out / "lambda_con=0.0" / "mtkd.ckpt").exists()
