import numpy as np
import pytest
import torch

from segadapt.domains import build_benchmark, default_benchmark_config
from segadapt.errors import ConfigError, ContractError, IsolationError, NumericAbort
from segadapt.mtstn import MTSTNConfig, train_mtstn
from segadapt.segnet import OutputDiscriminator, SegNet, parameter_hash
from segadapt.trainers import (
    TrainConfig, adapt_utkd, poly_lr, rampup_weight, run_setting, source_only_config, style_targets, train_mtkd,
)


@pytest.fixture(scope="module")
def bench():
    return build_benchmark(default_benchmark_config(train_size=8, eval_size=4, image_size=(32, 32)))


@pytest.fixture(scope="module")
def stn(bench):
    cfg = MTSTNConfig(epochs=1, steps_per_epoch=2, style_dim=8, blocks=1, base_width=4, disc_width=4)
    return train_mtstn(bench, cfg, targets=["hazy", "dusk", "grain"])[0]


def _cfg(**kw):
    kw.setdefault("iterations", 6)
    kw.setdefault("warmup", 2)
    kw.setdefault("style_transfer", True)
    return TrainConfig(log_every=2, **kw)


def test_poly_lr():
    assert poly_lr(2.5e-5, 0, 100) == 2.5e-5
    assert poly_lr(2.5e-5, 100, 100) == 0.0
    assert poly_lr(2.5e-5, 50, 100, 0.9) == pytest.approx(1.3397e-5, rel=1e-4)
    lrs = [poly_lr(1.0, i, 10) for i in range(11)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        poly_lr(1.0, 11, 10)


def test_rampup_weight():
    assert rampup_weight(0, 100) == pytest.approx(np.exp(-5.0))
    assert rampup_weight(50, 100) == pytest.approx(np.exp(-1.25))
    assert rampup_weight(100, 100) == 1.0
    assert rampup_weight(500, 100) == 1.0
    assert rampup_weight(0, 0) == 1.0


def test_grad_clip_applies_to_adaptation_steps_only(bench, stn, monkeypatch):
    calls = []
    real = torch.nn.utils.clip_grad_norm_

    def spy(params, max_norm):
        calls.append(max_norm)
        return real(params, max_norm)

    monkeypatch.setattr(torch.nn.utils, "clip_grad_norm_", spy)
    train_mtkd(bench, _cfg(grad_clip=0.5), stn)
    assert calls == [0.5] * 4
    calls.clear()
    train_mtkd(bench, _cfg(grad_clip=None), stn)
    assert calls == []


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(alpha=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(lambda_con=-1)
    with pytest.raises(ConfigError):
        TrainConfig(augmentation="mixup")
    with pytest.raises(ConfigError):
        TrainConfig(iterations=0)
    with pytest.raises(ConfigError):
        TrainConfig(grad_clip=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(con_rampup=-1)


def test_missing_style_assets_is_config_error(bench):
    with pytest.raises(ConfigError):
        train_mtkd(bench, _cfg())


def test_alpha_one_freezes_teacher(bench, stn):
    torch.manual_seed(0)
    init = parameter_hash(SegNet())
    res = train_mtkd(bench, _cfg(alpha=1.0, warmup=0), stn)
    assert parameter_hash(res.teacher) == init
    assert parameter_hash(res.student) != init


def test_teacher_cloned_after_warmup(bench, stn):
    warm = train_mtkd(bench, _cfg(iterations=3, warmup=3, seed=2), stn)
    assert parameter_hash(warm.teacher) == parameter_hash(warm.student)
    res = train_mtkd(bench, _cfg(iterations=6, warmup=3, alpha=1.0, seed=2), stn)
    # iterations 0..2 are identical in both runs, so the frozen teacher equals the
    # warm-up student except for the poly schedule, which depends on the total length
    assert parameter_hash(res.teacher) != parameter_hash(res.student)
    with pytest.raises(ConfigError):
        TrainConfig(iterations=5, warmup=6)


def test_warmup_reads_only_source(bench, stn):
    bench.registry.reset()
    train_mtkd(bench, _cfg(iterations=3, warmup=3), stn)
    assert bench.registry.read_set() == {bench.source.train.key} | {d.train.key for d in bench.targets}


def test_alpha_zero_teacher_tracks_student(bench, stn):
    res = train_mtkd(bench, _cfg(alpha=0.0), stn)
    assert parameter_hash(res.teacher) == parameter_hash(res.student)


def test_source_only_is_zero_weights(bench):
    a = run_setting("no_adaptation", bench, _cfg(seed=3))
    b = train_mtkd(bench, source_only_config(_cfg(seed=3)))
    assert parameter_hash(a.models["teacher"]) == parameter_hash(b.teacher)
    assert a.models["d_out"] is None


def test_training_is_deterministic(bench, stn):
    a = train_mtkd(bench, _cfg(seed=5), stn)
    b = train_mtkd(bench, _cfg(seed=5), stn)
    assert parameter_hash(a.teacher) == parameter_hash(b.teacher)
    assert a.history == b.history


def test_minimax_alternation(bench, stn, monkeypatch):
    """The student is bitwise unchanged across each discriminator step."""
    import segadapt.trainers as tr

    holder = {}
    before_d, at_ema = [], []
    real_adv, real_ema = tr.losses.mtkd_output_adv, tr.ema_update

    def adv(pred_source, preds_targets, d_out):
        before_d.append(parameter_hash(holder["student"]))
        return real_adv(pred_source, preds_targets, d_out)

    def ema(teacher, student, alpha):
        holder["student"] = student
        at_ema.append(parameter_hash(student))
        return real_ema(teacher, student, alpha)

    real_init = tr.SegNet.__init__

    def init(self, *a, **k):
        real_init(self, *a, **k)
        holder.setdefault("student", self)

    monkeypatch.setattr(tr.SegNet, "__init__", init)
    monkeypatch.setattr(tr.losses, "mtkd_output_adv", adv)
    monkeypatch.setattr(tr, "ema_update", ema)
    train_mtkd(bench, _cfg(iterations=3, warmup=0), stn)
    assert len(before_d) == len(at_ema) == 3
    assert before_d == at_ema


def test_d_step_does_not_touch_student(bench, stn, monkeypatch):
    import segadapt.trainers as tr

    calls = []
    real = tr.losses.mtkd_output_adv

    def wrapped(pred_source, preds_targets, d_out):
        assert not pred_source.requires_grad and not any(q.requires_grad for q in preds_targets)
        calls.append(1)
        return real(pred_source, preds_targets, d_out)

    monkeypatch.setattr(tr.losses, "mtkd_output_adv", wrapped)
    train_mtkd(bench, _cfg(iterations=2, warmup=0), stn)
    assert len(calls) == 2


def test_student_step_does_not_touch_discriminator(bench, stn, monkeypatch):
    import segadapt.trainers as tr

    real = tr.losses.mtkd_student_adv

    def wrapped(preds, d_out):
        assert not any(p.requires_grad for p in d_out.parameters())
        return real(preds, d_out)

    monkeypatch.setattr(tr.losses, "mtkd_student_adv", wrapped)
    train_mtkd(bench, _cfg(iterations=2, warmup=0), stn)


def test_numeric_abort_carries_diagnostics(bench, stn):
    with pytest.raises(NumericAbort) as info:
        train_mtkd(bench, _cfg(lr=1e30, iterations=30), stn)
    assert "iteration" in info.value.diagnostics


def test_utkd_isolation_and_freeze(bench, stn):
    pre = train_mtkd(bench, _cfg(), stn, targets=["hazy", "dusk"])
    before = parameter_hash(pre.d_out)
    bench.registry.reset()
    res = adapt_utkd((pre.teacher, pre.d_out), bench.unseen.train, _cfg())
    assert set(res.reads) == {bench.unseen.train.key}
    assert bench.registry.read_set() == {bench.unseen.train.key}
    assert parameter_hash(pre.d_out) == before == res.d_out_hash


def test_utkd_rejects_external_reads(bench, stn):
    pre = train_mtkd(bench, _cfg(iterations=2), stn, targets=["hazy", "dusk"])

    class Sneaky:
        key = bench.unseen.train.key
        registry = bench.registry

        def __len__(self):
            return 8

        def images(self, idx):
            bench.source.train.images(idx)
            return bench.unseen.train.images(idx)

    with pytest.raises(IsolationError):
        adapt_utkd((pre.teacher, pre.d_out), Sneaky(), _cfg(iterations=2))


def test_utkd_contracts(bench):
    with pytest.raises(ConfigError):
        adapt_utkd((SegNet(), None), bench.unseen.train, _cfg())
    # the adapter works on its own frozen copy of D; the caller's D stays trainable and untouched
    d = OutputDiscriminator()
    adapt_utkd((SegNet(), d), bench.unseen.train, _cfg(iterations=2))
    assert all(p.requires_grad for p in d.parameters())


def test_utkd_scratch_init_and_frozen_consistency(bench):
    torch.manual_seed(0)
    model, d = SegNet(), OutputDiscriminator()
    res = adapt_utkd((model, d), bench.unseen.train, _cfg(init="scratch", lambda_fro=10.0, iterations=2))
    assert parameter_hash(res.student) != parameter_hash(model)
    assert all("fro" in h for h in res.history)


def test_style_targets(bench):
    cfg = TrainConfig(style_transfer=True)
    assert style_targets("utkd", bench, cfg) == ["hazy", "dusk"]
    assert style_targets("multi_target", bench, cfg) == ["hazy", "dusk", "grain"]
    assert style_targets("single_target", bench, cfg) == ["grain"]
    assert style_targets("no_adaptation", bench, cfg) == []
    assert style_targets("utkd", bench, cfg.replace(style_transfer=False)) == []


def test_multi_target_with_one_target_equals_single_target(bench, stn):
    a = run_setting("single_target", bench, _cfg(seed=1), style_assets=stn)
    b = run_setting("multi_target", bench, _cfg(seed=1), style_assets=stn, targets=["grain"])
    assert parameter_hash(a.models["teacher"]) == parameter_hash(b.models["teacher"])
    assert [r.miou for r in a.reports[0].results] == [r.miou for r in b.reports[0].results]


def test_single_target_sees_one_target(bench, stn):
    with pytest.raises(IsolationError):
        run_setting("single_target", bench, _cfg(), style_assets=stn, targets=["hazy", "grain"])


def test_run_setting_modes(bench, stn):
    r = run_setting("utkd", bench, _cfg(), style_assets=stn)
    assert [rep.method for rep in r.reports] == ["mtkd_direct", "utkd"]
    assert set(r.reads["adapt"]) == {bench.unseen.train.key}
    assert set(r.reports[1].deltas) == {"hazy", "dusk", "grain", "avg"}
    r = run_setting("source_free_like", bench, _cfg())
    assert [rep.method for rep in r.reports] == ["source_only", "source_free_like"]
    with pytest.raises(ConfigError):
        run_setting("semi", bench, _cfg())
