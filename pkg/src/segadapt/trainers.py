"""Multi-target self-distillation with output-space adversarial learning, and the
one-way adaptation of a pretrained model to an unseen domain without external data.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import losses
from .augment import AUGMENTATIONS, TEACHER_VIEWS, compose_mtkd, compose_utkd, sample_cutmix_mask
from .domains import Benchmark, IndexStream, SceneDataset
from .errors import ConfigError, ContractError, IsolationError, NumericAbort
from .evaluation import DomainResult, MetricsReport, evaluate_model, report
from .segnet import OutputDiscriminator, SegNet, clone, ema_update, freeze, parameter_hash

log = logging.getLogger(__name__)

MODES = ("single_target", "multi_target", "source_free_like", "no_adaptation", "utkd")


@dataclass
class TrainConfig:
    lambda_con: float = 100.0
    lambda_out: float = 1e-3
    lambda_fro: float = 0.0
    alpha: float = 0.97  # EMA horizon ~33 steps, 2% of the adaptation phase
    iterations: int = 3000
    warmup: int | None = None  # source-only steps before adaptation starts; None = iterations // 2
    lr: float = 0.01
    warmup_lr: float | None = None  # student lr during warmup; None = lr
    momentum: float = 0.9
    weight_decay: float = 5e-5
    lr_d: float = 1e-4
    betas_d: tuple[float, float] = (0.9, 0.99)
    weight_decay_d: float = 5e-5
    poly_power: float = 0.9
    d_steps: int = 1
    seed: int = 0
    augmentation: str = "cutmix"
    style_transfer: bool = False
    teacher_view: str = "raw"
    noise_sigma: float = 0.1
    grad_clip: float | None = 2.0  # max student gradient norm during adaptation; None = no clipping
    con_rampup: int = 500  # adaptation steps over which lambda_con ramps up (sigmoid); 0 = full weight at once
    norm: str = "none"  # segmentation net normalization: "none" or "group"
    init: str = "pretrained"  # UT-KD student init: "pretrained" or "scratch"
    log_every: int = 50

    def __post_init__(self):
        if min(self.lambda_con, self.lambda_out, self.lambda_fro) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.warmup is not None and not 0 <= self.warmup <= self.iterations:
            raise ConfigError("warmup must lie in [0, iterations]")
        if min(self.lr, self.lr_d, self.warmup_lr if self.warmup_lr is not None else 1.0) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        if self.con_rampup < 0:
            raise ConfigError("con_rampup must be >= 0")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation must be one of {AUGMENTATIONS}")
        if self.teacher_view not in TEACHER_VIEWS:
            raise ConfigError(f"teacher_view must be one of {TEACHER_VIEWS}")
        if self.norm not in ("none", "group"):
            raise ConfigError("norm must be 'none' or 'group'")
        if self.init not in ("pretrained", "scratch"):
            raise ConfigError("init must be 'pretrained' or 'scratch'")
        self.betas_d = tuple(self.betas_d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def warmup_steps(self):
        return self.iterations // 2 if self.warmup is None else self.warmup

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas_d"] = list(self.betas_d)
        return d


# Optimizer settings of the full-scale backbone, kept for reference; the toy defaults differ.
FULL_SCALE_OPTIMIZER = {"lr": 2.5e-5, "momentum": 0.0, "lr_d": 1e-5, "iterations": 50_000}


def poly_lr(base, i, total, power=0.9):
    if i < 0 or i > total:
        raise ValueError(f"iteration {i} outside [0, {total}]")
    return base * (1.0 - i / total) ** power


def rampup_weight(step, length):
    """Sigmoid-shaped ramp exp(-5 (1 - t)^2), t = step / length clipped to [0, 1]."""
    if length <= 0:
        return 1.0
    t = min(max(step / length, 0.0), 1.0)
    return float(np.exp(-5.0 * (1.0 - t) ** 2))


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _nchw(arr):
    return torch.from_numpy(np.array(arr)).permute(0, 3, 1, 2).float()


@dataclass
class TrainResult:
    student: SegNet
    teacher: SegNet
    d_out: OutputDiscriminator | None
    history: list[dict] = field(default_factory=list)
    targets: list[str] = field(default_factory=list)


def _check_finite(value, i, parts, last_good):
    if not torch.isfinite(value):
        raise NumericAbort(
            f"non-finite loss at iteration {i}: " + ", ".join(f"{k}={v:.4g}" for k, v in parts.items()),
            {"iteration": i, "parts": parts, "last_good": last_good},
        )


def train_mtkd(benchmark: Benchmark, config: TrainConfig, style_assets=None, targets=None, progress=None):
    """Student/teacher training on the labeled source and unlabeled target domains.

    The first ``warmup`` iterations train the student on labeled source
    images alone, standing in for a pretrained initialization; the teacher
    is then cloned from the student.  Every later iteration draws one
    labeled source image and a pair of images from every target domain.
    The student minimizes cross-entropy + lambda_con * consistency (against
    mixed teacher pseudo labels) + lambda_out * the target-side adversarial
    terms; the output discriminator then ascends the full adversarial value
    on detached predictions; finally the teacher is EMA-updated.

    lambda_con ramps up over the first ``con_rampup`` adaptation steps and the
    student gradient norm is clipped at ``grad_clip``: a full-weight
    consistency term on a freshly cloned teacher otherwise destabilizes the
    small network within a few dozen steps.

    ``targets`` defaults to the benchmark's known targets and may name any
    non-source domain (e.g. the unseen one, for single/multi-target baselines).
    """
    cfg = config
    names = targets if targets is not None else [t.spec.name for t in benchmark.targets]
    if not names:
        raise ConfigError("train_mtkd needs at least one target domain")
    domains = [benchmark.domain(n) for n in names]
    use_con = cfg.lambda_con > 0
    use_adv = cfg.lambda_out > 0
    use_style = use_con and cfg.style_transfer
    if use_style:
        if style_assets is None:
            raise ConfigError("style transfer is enabled but no trained style transfer network was given")
        missing = [n for n in names + [benchmark.source.spec.name] if n not in style_assets.styles]
        if missing:
            raise ConfigError(f"style transfer network has no style for {missing}")

    torch.manual_seed(cfg.seed)
    num_classes = benchmark.class_count
    student = SegNet(num_classes, norm=cfg.norm)
    warmup = cfg.warmup_steps()
    teacher = clone(student) if warmup == 0 else None
    d_out = OutputDiscriminator(num_classes) if use_adv else None
    opt = torch.optim.SGD(student.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    opt_d = (
        torch.optim.Adam(d_out.parameters(), lr=cfg.lr_d, betas=cfg.betas_d, weight_decay=cfg.weight_decay_d)
        if use_adv else None
    )
    rng = np.random.default_rng([cfg.seed, 1])
    src = benchmark.source.train
    src_stream = IndexStream(len(src), cfg.seed, src.key)
    tgt_streams = [IndexStream(len(d.train), cfg.seed, d.train.key) for d in domains]

    transferred = {}
    if use_style:
        # The transfer network is fixed during this stage, so transferring each
        # training image once is equivalent to transferring on the fly.
        for d in domains:
            transferred[d.spec.name] = style_assets.to_style(d.train.images(), benchmark.source.spec.name)

    history, last_good = [], None

    def _log(i, lr, parts, d_value):
        nonlocal last_good
        if i % cfg.log_every == 0 or i == cfg.iterations - 1:
            entry = {"iteration": i, "lr": lr, **parts, "d_value": d_value}
            history.append(entry)
            model = teacher if teacher is not None else student
            last_good = {"iteration": i, "model": {k: v.clone() for k, v in model.state_dict().items()}}
            if progress:
                progress(entry)

    warmup_lr = cfg.lr if cfg.warmup_lr is None else cfg.warmup_lr
    for i in range(cfg.iterations):
        # poly decay within each phase
        if i < warmup:
            lr = poly_lr(warmup_lr, i, warmup, cfg.poly_power)
        else:
            lr = poly_lr(cfg.lr, i - warmup, cfg.iterations - warmup, cfg.poly_power)
            if opt_d is not None:
                _set_lr(opt_d, poly_lr(cfg.lr_d, i - warmup, cfg.iterations - warmup, cfg.poly_power))
        _set_lr(opt, lr)

        s_idx = src_stream.take(1)
        x_s = _nchw(src.images(s_idx))
        y_s = torch.from_numpy(src.labels(s_idx))
        if i < warmup:
            ce = losses.cross_entropy_labels(y_s, student(x_s))
            parts = {"ce": ce.item(), "con": 0.0, "adv": 0.0}
            _check_finite(ce, i, parts, last_good)
            opt.zero_grad()
            ce.backward()
            opt.step()
            _log(i, lr, parts, 0.0)
            continue
        if teacher is None:
            teacher = clone(student)
        pairs = []
        for d, stream in zip(domains, tgt_streams):
            idx = stream.take(2)
            x = _nchw(d.train.images(idx))
            t = _nchw(transferred[d.spec.name][idx]) if use_style else None
            pairs.append((x, t))

        # student step
        if d_out is not None:
            for p in d_out.parameters():
                p.requires_grad_(False)
        inputs, pseudo = [x_s], []
        for x, t in pairs:
            if use_con:
                tr = (t[:1], t[1:]) if t is not None else None
                inp, q = compose_mtkd(
                    x[:1], x[1:], teacher, rng, transferred=tr, teacher_view=cfg.teacher_view,
                    kind=cfg.augmentation, noise_sigma=cfg.noise_sigma,
                )
                inputs.append(inp)
                pseudo.append(q)
        n_mix = len(pseudo)
        if use_adv:
            inputs += [x[:1] for x, _ in pairs]
        out = student(torch.cat(inputs))
        q_s = out[:1]
        ce = losses.cross_entropy_labels(y_s, q_s)
        con = sum(losses.consistency(out[1 + k:2 + k], pseudo[k]) for k in range(n_mix)) if use_con else torch.zeros(())
        q_t = [out[1 + n_mix + k:2 + n_mix + k] for k in range(len(pairs))] if use_adv else []
        adv = losses.mtkd_student_adv(q_t, d_out) if use_adv else torch.zeros(())
        lam_con = cfg.lambda_con * rampup_weight(i - warmup, cfg.con_rampup)
        loss = losses.mtkd_objective(ce, con, adv, lam_con, cfg.lambda_out)
        parts = {"ce": ce.item(), "con": con.item(), "adv": adv.item()}
        _check_finite(loss, i, parts, last_good)
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(student.parameters(), cfg.grad_clip)
        opt.step()

        # discriminator step
        d_value = 0.0
        if use_adv:
            for p in d_out.parameters():
                p.requires_grad_(True)
            for _ in range(cfg.d_steps):
                value = losses.mtkd_output_adv(q_s.detach(), [q.detach() for q in q_t], d_out)
                _check_finite(value, i, {**parts, "d_value": value.item()}, last_good)
                opt_d.zero_grad()
                (-value).backward()
                opt_d.step()
                d_value = value.item()

        ema_update(teacher, student, cfg.alpha)
        _log(i, lr, parts, d_value)

    if teacher is None:
        teacher = clone(student)
    if d_out is not None:
        for p in d_out.parameters():
            p.requires_grad_(True)
    return TrainResult(student, teacher, d_out, history, list(names))


@dataclass
class AdaptResult:
    student: SegNet
    teacher: SegNet
    history: list[dict]
    reads: dict[str, int]
    d_out_hash: str


def adapt_utkd(pretrained, unseen: SceneDataset, config: TrainConfig, progress=None):
    """Adapt a pretrained (teacher, output discriminator) pair to one unlabeled domain.

    ``pretrained`` is a ``(segnet, d_out)`` tuple; ``d_out`` may be None when
    the adversarial weight is zero.  Nothing but ``unseen`` is readable: the
    dataset registry is restricted to it for the whole call, so any read of
    another dataset raises :class:`IsolationError`.  The discriminator is
    frozen and only evaluated, never updated.
    """
    cfg = config
    model, d_out = pretrained
    if cfg.lambda_out > 0 and d_out is None:
        raise ConfigError("one-way adversarial loss needs the pretrained output discriminator")
    registry = unseen.registry
    if registry is not None:
        before = dict(registry.counts)
        guard = registry.restrict({unseen.key})
    else:
        before, guard = {}, _nullcontext()

    torch.manual_seed(cfg.seed)
    d_hash = None
    if d_out is not None:
        d_out = freeze(clone(d_out))
        d_hash = parameter_hash(d_out)
    teacher = clone(model)
    if cfg.init == "scratch":
        student = SegNet(**model.arch)
    else:
        student = clone(model)
    frozen = freeze(clone(model)) if cfg.lambda_fro > 0 else None
    opt = torch.optim.SGD(student.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 2])
    stream = IndexStream(len(unseen), cfg.seed, unseen.key)
    use_con = cfg.lambda_con > 0 or cfg.lambda_fro > 0
    use_adv = cfg.lambda_out > 0

    history = []
    with guard:
        for i in range(cfg.iterations):
            lr = poly_lr(cfg.lr, i, cfg.iterations, cfg.poly_power)
            _set_lr(opt, lr)
            x = _nchw(unseen.images(stream.take(2)))
            x_a, x_b = x[:1], x[1:]
            inputs, targets = [], []
            if use_con:
                mask = sample_cutmix_mask(*x.shape[-2:], rng) if cfg.augmentation == "cutmix" else None
                inp, q = compose_utkd(x_a, x_b, teacher, rng, kind=cfg.augmentation, noise_sigma=cfg.noise_sigma, mask=mask)
                inputs.append(inp)
                targets.append(q)
                if frozen is not None:
                    _, q_fro = compose_utkd(x_a, x_b, frozen, rng, kind=cfg.augmentation, noise_sigma=0.0, mask=mask)
                    targets.append(q_fro)
            if use_adv:
                inputs.append(x_a)
            out = student(torch.cat(inputs))
            con = losses.consistency(out[:1], targets[0]) if cfg.lambda_con > 0 else torch.zeros(())
            fro = losses.frozen_consistency(out[:1], targets[-1]) if frozen is not None else torch.zeros(())
            adv = losses.utkd_one_way(out[-1:], d_out) if use_adv else torch.zeros(())
            ramp = rampup_weight(i, cfg.con_rampup)
            loss = losses.utkd_objective(con, adv, ramp * cfg.lambda_con, cfg.lambda_out) + ramp * cfg.lambda_fro * fro
            parts = {"con": con.item(), "adv": adv.item(), "fro": fro.item()}
            _check_finite(loss, i, parts, None)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(student.parameters(), cfg.grad_clip)
            opt.step()
            ema_update(teacher, student, cfg.alpha)
            if i % cfg.log_every == 0 or i == cfg.iterations - 1:
                entry = {"iteration": i, "lr": lr, **parts}
                history.append(entry)
                if progress:
                    progress(entry)

    if d_out is not None and parameter_hash(d_out) != d_hash:
        raise ContractError("output discriminator changed during one-way adaptation")
    reads = {}
    if registry is not None:
        reads = {k: v - before.get(k, 0) for k, v in registry.counts.items() if v - before.get(k, 0) > 0}
        if set(reads) - {unseen.key}:
            raise IsolationError(f"adaptation read external data: {sorted(set(reads) - {unseen.key})}")
    return AdaptResult(student, teacher, history, reads, d_hash or "")


class _nullcontext:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


# -- problem settings -----------------------------------------------------------


def evaluate_domains(model, benchmark: Benchmark, domain_names):
    results = []
    for n in domain_names:
        d = benchmark.domain(n)
        cm = evaluate_model(model, d.eval.eval_images(), d.eval.eval_labels(), benchmark.class_count)
        results.append(DomainResult.from_cm(n, cm))
    return results


@dataclass
class SettingResult:
    mode: str
    reports: list[MetricsReport]
    models: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)
    reads: dict = field(default_factory=dict)


def source_only_config(cfg: TrainConfig):
    return cfg.replace(lambda_con=0.0, lambda_out=0.0, lambda_fro=0.0)


def style_targets(mode, benchmark: Benchmark, config: TrainConfig):
    """Target domains the transfer network must cover for ``mode``; empty if none is needed."""
    if mode in ("no_adaptation", "source_free_like") or config.lambda_con == 0 or not config.style_transfer:
        return []
    known = [t.spec.name for t in benchmark.targets]
    unseen = benchmark.unseen.spec.name
    return {"single_target": [unseen], "multi_target": known + [unseen], "utkd": known}[mode]


def _run_now(name, fn):
    return fn()


def run_setting(mode, benchmark: Benchmark, pretrain: TrainConfig, adapt: TrainConfig | None = None,
                style_assets=None, eval_domains=None, targets=None, progress=None, stage=_run_now):
    """Train and evaluate one row group of the settings table.

    single_target      source -> unseen (the unseen domain is the one target at training)
    multi_target       source -> known targets + unseen
    source_free_like   source-only pretraining, then self-distillation on unseen alone
    no_adaptation      source-only training evaluated everywhere
    utkd               (source -> known targets) -> unseen without external data

    ``stage(name, fn)`` wraps every training stage; the default just calls
    ``fn()``, a caller may substitute a version that caches results on disk.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
    adapt = adapt or pretrain
    known = [t.spec.name for t in benchmark.targets]
    unseen = benchmark.unseen.spec.name
    evals = eval_domains or known + [unseen]
    out = SettingResult(mode, [])

    if mode in ("no_adaptation", "single_target", "multi_target"):
        if mode == "no_adaptation":
            res = stage("source_only", lambda: train_mtkd(benchmark, source_only_config(pretrain), progress=progress))
        else:
            if targets is None:
                targets = [unseen] if mode == "single_target" else known + [unseen]
            if mode == "single_target" and len(targets) != 1:
                raise IsolationError("single_target sees exactly one target domain")
            res = stage(mode, lambda: train_mtkd(benchmark, pretrain, style_assets, targets=targets, progress=progress))
        out.models.update(student=res.student, teacher=res.teacher, d_out=res.d_out)
        out.histories["pretrain"] = res.history
        out.reports.append(report(mode, evaluate_domains(res.teacher, benchmark, evals), metadata={"seed": pretrain.seed}))
        return out

    if mode == "source_free_like":
        pre = stage("source_only", lambda: train_mtkd(benchmark, source_only_config(pretrain), progress=progress))
        base = report("source_only", evaluate_domains(pre.teacher, benchmark, [unseen]), metadata={"seed": pretrain.seed})
        ad = stage("source_free_like", lambda: adapt_utkd(
            (pre.teacher, None), benchmark.unseen.train, adapt.replace(lambda_out=0.0), progress=progress))
        out.models.update(pretrained=pre.teacher, student=ad.student, teacher=ad.teacher)
        out.histories.update(pretrain=pre.history, adapt=ad.history)
        out.reads["adapt"] = ad.reads
        out.reports += [base, report(mode, evaluate_domains(ad.teacher, benchmark, [unseen]), baseline=base,
                                     metadata={"seed": adapt.seed})]
        return out

    # utkd: multi-target pretraining on the known targets, then external-data-free adaptation
    pre = stage("mtkd", lambda: train_mtkd(benchmark, pretrain, style_assets, targets=known, progress=progress))
    direct = report("mtkd_direct", evaluate_domains(pre.teacher, benchmark, evals), metadata={"seed": pretrain.seed})
    ad = stage("utkd", lambda: adapt_utkd((pre.teacher, pre.d_out), benchmark.unseen.train, adapt, progress=progress))
    adapted = report("utkd", evaluate_domains(ad.teacher, benchmark, evals), baseline=direct,
                     metadata={"seed": adapt.seed})
    out.models.update(pretrained=pre.teacher, d_out=pre.d_out, student=ad.student, teacher=ad.teacher)
    out.histories.update(pretrain=pre.history, adapt=ad.history)
    out.reads["adapt"] = ad.reads
    out.reports += [direct, adapted]
    return out
