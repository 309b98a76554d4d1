"""Command line entry point: ``segadapt <subcommand> CONFIG [--seed N] [--out DIR] [--resume]``.

Every run directory holds ``config.yaml`` (the fully resolved config),
checkpoints (``<stage>.ckpt``), ``metrics.csv`` + ``table.txt``, per-stage
loss logs ``history_<stage>.csv`` and plots ``curves_<stage>.png``, and a
``manifest.json`` listing every file with its SHA-256.

Exit codes: 0 ok, 2 config/schema error, 3 isolation violation, 4 numeric
abort, 5 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import config as config_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .domains import build_benchmark
from .errors import CheckpointError, ConfigError, IsolationError, NumericAbort
from .evaluation import read_csv, render_table, report, write_csv
from .mtstn import MTSTN, train_mtstn
from .trainers import (
    AdaptResult, TrainResult, adapt_utkd, evaluate_domains, run_setting, style_targets, train_mtkd,
)

log = logging.getLogger("segadapt")

EXIT_OK, EXIT_CONFIG, EXIT_ISOLATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5
ABLATIONS = ("alpha", "lambda_con", "lambda_out", "augmentation", "lambda_fro")
WITHOUT_EXTERNAL = {"utkd", "source_free_like"}
WITH_EXTERNAL = {"mtkd_direct", "multi_target", "single_target", "mtkd"}
PALETTE = np.array([[128, 64, 128], [70, 70, 70], [250, 170, 30], [107, 142, 35],
                    [70, 130, 180], [220, 20, 60], [0, 0, 142]], dtype=np.uint8)


# -- run directory ----------------------------------------------------------------


class RunDir:
    def __init__(self, path, resume=False):
        self.path = Path(path)
        self.resume = resume
        self.path.mkdir(parents=True, exist_ok=True)

    def file(self, name):
        return self.path / name

    def write_config(self, cfg):
        snap = config_mod.snapshot(cfg)
        self.file("config.yaml").write_text(yaml.safe_dump(snap, sort_keys=True))

    def stage(self, name, fn):
        """Run a training stage, or load its checkpoint when resuming."""
        path = self.file(f"{name}.ckpt")
        if self.resume and path.exists():
            log.info("resume: loading stage %s from %s", name, path)
            return _load_stage(path)
        result = fn()
        _save_stage(result, path)
        self.write_history(name, result.history)
        return result

    def write_history(self, name, history):
        if not history:
            return
        keys = list(history[0].keys())
        with open(self.file(f"history_{name}.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for row in history:
                w.writerow([f"{row[k]:.6g}" if isinstance(row[k], float) else row[k] for k in keys])
        _plot_curves(history, self.file(f"curves_{name}.png"), name)

    def write_reports(self, reports, name="metrics"):
        write_csv(reports, self.file(f"{name}.csv"))
        self.file("table.txt" if name == "metrics" else f"{name}.txt").write_text(render_table(reports) + "\n")

    def write_manifest(self, extra=None):
        files = {}
        for p in sorted(self.path.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                files[str(p.relative_to(self.path))] = hashlib.sha256(p.read_bytes()).hexdigest()
        body = {"files": files, **(extra or {})}
        self.file("manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _save_stage(result, path):
    comps = {"student": result.student, "teacher": result.teacher}
    if isinstance(result, TrainResult):
        if result.d_out is not None:
            comps["d_out"] = result.d_out
        meta = {"type": "mtkd", "history": result.history, "targets": result.targets}
    else:
        meta = {"type": "utkd", "history": result.history, "reads": result.reads, "d_out_hash": result.d_out_hash}
    save_checkpoint(comps, path, meta)


def _load_stage(path):
    comps, meta = load_checkpoint(path)
    if meta.get("type") == "mtkd":
        return TrainResult(comps["student"], comps["teacher"], comps.get("d_out"), meta["history"], meta["targets"])
    return AdaptResult(comps["student"], comps["teacher"], meta["history"], meta["reads"], meta["d_out_hash"])


def _plot_curves(history, path, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    it = [h.get("iteration", h.get("epoch")) for h in history]
    keys = [k for k in history[0] if k not in ("iteration", "epoch", "lr")]
    fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 2.8), squeeze=False)
    for ax, k in zip(axes[0], keys):
        ax.plot(it, [h[k] for h in history])
        ax.set_title(k)
        ax.set_xlabel("iteration" if "iteration" in history[0] else "epoch")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def _plot_sweep(param, values, avgs, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3))
    xs = list(range(len(values)))
    ax.plot(xs, [100 * a for a in avgs], marker="o")
    ax.set_xticks(xs, [str(v) for v in values], rotation=30)
    ax.set_xlabel(param)
    ax.set_ylabel("Avg mIoU (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def _dump_overlays(model, benchmark, domains, n, out_dir):
    from PIL import Image

    from .evaluation import predict_labels

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in domains:
        ds = benchmark.domain(name).eval
        imgs = ds.eval_images()[:n]
        with torch.no_grad():
            model.eval()
            pred = predict_labels(model(torch.from_numpy(np.array(imgs)).permute(0, 3, 1, 2)))
        for i in range(len(imgs)):
            raw = (imgs[i] * 255).round().astype(np.uint8)
            row = np.concatenate([raw, PALETTE[pred[i]], PALETTE[ds.eval_labels()[i]]], axis=1)
            Image.fromarray(row, "RGB").save(out_dir / f"{name}_{i:03d}.png")


def _transfer_grid(stn: MTSTN, benchmark, path, per_domain=2):
    """Rows: input images of each domain; columns: the input, then one transfer per registered style."""
    from PIL import Image

    names = stn.styles.names()
    rows = []
    for d in names:
        imgs = benchmark.domain(d).eval.eval_images()[:per_domain]
        cols = [imgs] + [stn.to_style(imgs, s) for s in names]
        for i in range(len(imgs)):
            rows.append(np.concatenate([c[i] for c in cols], axis=1))
    grid = (np.concatenate(rows, axis=0) * 255).round().astype(np.uint8)
    Image.fromarray(grid, "RGB").save(path)


# -- subcommands ------------------------------------------------------------------


def _prepare(args):
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = cfg.with_output(args.out)
    torch.manual_seed(cfg.pretrain.seed)
    run = RunDir(cfg.output["dir"], resume=args.resume)
    run.write_config(cfg)
    return cfg, run, build_benchmark(cfg.benchmark)


def _style_assets(cfg, run, benchmark, mode, train_cfg, name="mtstn"):
    targets = style_targets(mode, benchmark, train_cfg)
    if not targets:
        return None
    if cfg.mtstn_checkpoint:
        stn = MTSTN.load(cfg.mtstn_checkpoint)
        missing = [t for t in targets if t not in stn.styles]
        if missing:
            raise ConfigError(f"style transfer checkpoint has no style for {missing}")
        return stn
    path = run.file(f"{name}.ckpt")
    if run.resume and path.exists():
        return MTSTN.load(path)
    stn, hist = train_mtstn(benchmark, cfg.mtstn, targets=targets, progress=_log_progress)
    stn.save(path, {"config": cfg.mtstn.to_dict()})
    run.write_history(name, hist.epochs)
    return stn


def _log_progress(entry):
    log.info(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in entry.items()))


def cmd_train_mtstn(args):
    cfg, run, bench = _prepare(args)
    targets = style_targets(cfg.mode, bench, cfg.pretrain) or [t.spec.name for t in bench.targets]
    path = run.file("mtstn.ckpt")
    if run.resume and path.exists():
        stn = MTSTN.load(path)
    else:
        stn, hist = train_mtstn(bench, cfg.mtstn, targets=targets, progress=_log_progress)
        stn.save(path, {"config": cfg.mtstn.to_dict()})
        run.write_history("mtstn", hist.epochs)
    _transfer_grid(stn, bench, run.file("transfer_grid.png"))
    run.write_manifest({"command": "train-mtstn"})
    return EXIT_OK


def cmd_train_mtkd(args):
    cfg, run, bench = _prepare(args)
    stn = _style_assets(cfg, run, bench, "utkd", cfg.pretrain)
    known = [t.spec.name for t in bench.targets]
    res = run.stage("mtkd", lambda: train_mtkd(bench, cfg.pretrain, stn, targets=known, progress=_log_progress))
    evals = known + [bench.unseen.spec.name]
    run.write_reports([report("mtkd", evaluate_domains(res.teacher, bench, evals), metadata={"seed": cfg.pretrain.seed})])
    _finish(cfg, run, res.teacher, bench, evals, "train-mtkd")
    return EXIT_OK


def cmd_adapt_utkd(args):
    cfg, run, bench = _prepare(args)
    ckpt = args.checkpoint or cfg.checkpoint
    if not ckpt:
        raise ConfigError("method.checkpoint: adapt-utkd needs a pretrained checkpoint (or --checkpoint)")
    comps, _ = load_checkpoint(ckpt)
    if "teacher" not in comps:
        raise CheckpointError(f"{ckpt}: manifest mismatch, no 'teacher' component")
    teacher, d_out = comps["teacher"], comps.get("d_out")
    evals = [t.spec.name for t in bench.targets] + [bench.unseen.spec.name]
    direct = report("mtkd_direct", evaluate_domains(teacher, bench, evals))
    res = run.stage("utkd", lambda: adapt_utkd((teacher, d_out), bench.unseen.train, cfg.adapt, progress=_log_progress))
    adapted = report("utkd", evaluate_domains(res.teacher, bench, evals), baseline=direct, metadata={"seed": cfg.adapt.seed})
    run.write_reports([direct, adapted])
    (run.file("reads.json")).write_text(json.dumps(res.reads, sort_keys=True) + "\n")
    _finish(cfg, run, res.teacher, bench, evals, "adapt-utkd")
    return EXIT_OK


def cmd_evaluate(args):
    cfg, run, bench = _prepare(args)
    ckpt = args.checkpoint or cfg.checkpoint
    if not ckpt:
        raise ConfigError("method.checkpoint: evaluate needs a checkpoint (or --checkpoint)")
    comps, _ = load_checkpoint(ckpt)
    if args.component not in comps:
        raise CheckpointError(f"{ckpt}: manifest mismatch, no component {args.component!r} (have {sorted(comps)})")
    evals = [t.spec.name for t in bench.targets] + [bench.unseen.spec.name]
    run.write_reports([report(args.name, evaluate_domains(comps[args.component], bench, evals))])
    _finish(cfg, run, comps[args.component], bench, evals, "evaluate")
    return EXIT_OK


def cmd_run_setting(args):
    cfg, run, bench = _prepare(args)
    res = _setting(cfg, run, bench, cfg.mode)
    evals = [t.spec.name for t in bench.targets] + [bench.unseen.spec.name]
    run.write_reports(res.reports)
    if res.reads:
        run.file("reads.json").write_text(json.dumps(res.reads, sort_keys=True) + "\n")
    _finish(cfg, run, res.models["teacher"], bench, evals, "run-setting")
    return EXIT_OK


def _setting(cfg, run, bench, mode, shared=None, stn_run=None):
    stn = _style_assets(cfg, stn_run or run, bench, mode, cfg.pretrain)
    stage = run.stage
    if shared is not None:
        # the pretraining stage does not depend on the swept adaptation value
        def stage(name, fn):
            return (shared if name in ("mtkd", "source_only") else run).stage(name, fn)
    return run_setting(mode, bench, cfg.pretrain, cfg.adapt, style_assets=stn, progress=_log_progress, stage=stage)


def cmd_ablate(args):
    cfg, run, bench = _prepare(args)
    param = args.param
    stage = args.stage or ("adapt" if cfg.mode in ("utkd", "source_free_like") else "pretrain")
    values = cfg.sweep[param]
    shared = run if stage == "adapt" else None
    rows, finals = [], []
    for v in values:
        sub = config_mod.from_dict(_set_param(cfg.raw, stage, param, v, run.file(f"{param}={v}")))
        sub_run = RunDir(sub.output["dir"], resume=run.resume)
        sub_run.write_config(sub)
        res = _setting(sub, sub_run, bench, sub.mode, shared=shared, stn_run=run)
        sub_run.write_reports(res.reports)
        sub_run.write_manifest({"command": "ablate", param: v})
        final = res.reports[-1]
        final.method = f"{param}={v}"
        finals.append(final)
        rows.append([v, f"{final.avg_miou:.4f}"] + [f"{r.miou:.4f}" for r in final.results])
    with open(run.file(f"ablation_{param}.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([param, "avg"] + [r.domain for r in finals[0].results])
        w.writerows(rows)
    run.write_reports(finals, name=f"ablation_{param}_table")
    if cfg.output["plots"]:
        _plot_sweep(param, values, [f.avg_miou for f in finals], run.file(f"ablation_{param}.png"))
    run.write_manifest({"command": "ablate", "param": param, "stage": stage})
    return EXIT_OK


def _set_param(raw, stage, param, value, out_dir):
    import copy

    raw = copy.deepcopy(raw)
    raw["method"].setdefault(stage, {})[param] = value
    if stage == "adapt" and "adapt" not in raw["method"] and "pretrain" in raw["method"]:
        raw["method"]["adapt"] = {**raw["method"]["pretrain"], param: value}
    raw["output"]["dir"] = str(out_dir)
    return raw


def cmd_compare(args):
    runs = [Path(p) for p in args.runs]
    benches = []
    reports = []
    for r in runs:
        try:
            snap = yaml.safe_load((r / "config.yaml").read_text())
            reports += read_csv(str(r / "metrics.csv"))
        except FileNotFoundError as exc:
            raise OSError(f"{r}: not a run directory ({exc.filename} missing)") from exc
        benches.append(snap["benchmark"])
    if any(b != benches[0] for b in benches[1:]):
        raise ConfigError("benchmark: runs were produced on different benchmarks")
    by_name = {rep.method: rep for rep in reports}
    if args.baseline not in by_name:
        raise ConfigError(f"baseline {args.baseline!r} not found among {sorted(by_name)}")
    base = by_name[args.baseline]
    table = [report(rep.method, rep.results, baseline=base) for rep in reports]
    lines = [render_table(table), "", f"{'method':<22}{'Ext':>5}{'Avg':>8}{'delta':>9}  note"]
    for rep in table:
        ext = "no" if rep.method in WITHOUT_EXTERNAL else "yes"
        note = ""
        if ext == "no":
            beaten = [o.method for o in table if o.method in WITH_EXTERNAL and rep.avg_miou >= o.avg_miou]
            if beaten:
                note = "matches or beats with external data: " + ", ".join(beaten)
        delta = round(100 * rep.deltas["avg"], 1) + 0.0  # no "-0.0" for a run compared with itself
        lines.append(f"{rep.method:<22}{ext:>5}{100 * rep.avg_miou:>8.1f}{delta:>+9.1f}  {note}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(table, out / "comparison.csv")
        (out / "comparison.txt").write_text(text)
    return EXIT_OK


def _finish(cfg, run, model, bench, evals, command):
    if cfg.output["overlays"]:
        _dump_overlays(model, bench, evals, cfg.output["overlays"], run.file("overlays"))
    if not cfg.output["checkpoints"]:
        for p in run.path.glob("*.ckpt"):
            p.unlink()
    run.write_manifest({"command": command, "seed": cfg.pretrain.seed})


# -- entry point ------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="segadapt", description="Multi-target and unseen-target adaptation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="override training seeds")
        sp.add_argument("--out", help="override output.dir")
        sp.add_argument("--resume", action="store_true", help="reuse finished stage checkpoints in the run directory")

    for name, fn in [("train-mtstn", cmd_train_mtstn), ("train-mtkd", cmd_train_mtkd),
                     ("adapt-utkd", cmd_adapt_utkd), ("evaluate", cmd_evaluate), ("run-setting", cmd_run_setting)]:
        sp = sub.add_parser(name)
        common(sp)
        sp.set_defaults(func=fn)
        if name in ("adapt-utkd", "evaluate"):
            sp.add_argument("--checkpoint", help="checkpoint path (overrides method.checkpoint)")
        if name == "evaluate":
            sp.add_argument("--component", default="teacher")
            sp.add_argument("--name", default="evaluate", help="method name in the metrics file")

    sp = sub.add_parser("ablate")
    common(sp)
    sp.add_argument("param", choices=ABLATIONS)
    sp.add_argument("--stage", choices=("pretrain", "adapt"), help="which training stage the sweep applies to")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("compare")
    sp.add_argument("runs", nargs="+", help="run directories")
    sp.add_argument("--baseline", required=True, help="method name to compute deltas against")
    sp.add_argument("--out", help="directory for comparison.csv / comparison.txt")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IsolationError as exc:
        print(f"isolation violation: {exc}", file=sys.stderr)
        return EXIT_ISOLATION
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
