import numpy as np
import pytest
import torch

from segadapt.domains import build_benchmark, default_benchmark_config
from segadapt.errors import ConfigError, ShapeError
from segadapt.mtstn import (
    MTSTNConfig, StyleBank, StyleNet, StyleVector, channel_mean_distance, cin, style_gap, train_mtstn, transfer,
)


def test_cin_examples():
    torch.manual_seed(0)
    f = torch.randn(1, 4, 8, 8, dtype=torch.float64) * 3 + 1
    out = cin(f, (torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64)))
    assert torch.allclose(out.mean((2, 3)), torch.zeros(1, 4, dtype=torch.float64), atol=1e-6)
    assert torch.allclose(out.std((2, 3), unbiased=False), torch.ones(1, 4, dtype=torch.float64), atol=1e-3)
    beta = torch.tensor([0.1, -0.2, 0.3, 0.4], dtype=torch.float64)
    const = cin(f, (torch.zeros(4, dtype=torch.float64), beta))
    assert torch.allclose(const, beta.view(1, 4, 1, 1).expand_as(const))
    out = cin(f, StyleVector(torch.full((4,), 2.0, dtype=torch.float64), torch.full((4,), 0.5, dtype=torch.float64)))
    assert torch.all((out.mean((2, 3)) - 0.5).abs() < 1e-4)
    assert torch.all((out.std((2, 3), unbiased=False) - 2.0).abs() < 1e-3)


def test_cin_width_mismatch():
    with pytest.raises(ShapeError):
        cin(torch.randn(1, 4, 8, 8), (torch.ones(3), torch.zeros(3)))


def test_cin_moments_at_every_site():
    # He-normal weights keep every pre-CIN feature map at unit scale, far above the
    # epsilon inside the normalization
    torch.manual_seed(1)
    net = StyleNet(dim=16, blocks=3, base=8).double()
    for m in net.modules():
        if isinstance(m, torch.nn.Conv2d):
            torch.nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
    gamma = torch.randn(16, dtype=torch.float64) * 2
    beta = torch.randn(16, dtype=torch.float64)
    taps = []
    net(torch.rand(2, 3, 32, 32, dtype=torch.float64), (gamma, beta), taps=taps)
    assert len(taps) == net.cin_sites == 7
    for h in taps:
        assert torch.all((h.mean((2, 3)) - beta).abs() < 1e-4)
        assert torch.all((h.std((2, 3), unbiased=False) - gamma.abs()).abs() < 1e-3)


def test_transfer_bounded_and_deterministic():
    torch.manual_seed(2)
    net, bank = StyleNet(dim=8, blocks=1, base=4), StyleBank(8, ["a", "b"])
    x = torch.rand(3, 3, 16, 16)
    y = transfer(net, x, bank["a"])
    assert y.shape == x.shape and y.min() >= 0 and y.max() <= 1
    assert torch.equal(y, transfer(net, x, bank["a"]))
    with pytest.raises(ShapeError):
        net(torch.rand(1, 3, 18, 16), bank["a"])


def test_style_bank_registry():
    bank = StyleBank(8, ["s"])
    bank.register("t")
    assert bank.names() == ["s", "t"] and bank.arch == {"dim": 8, "names": ["s", "t"]}
    with pytest.raises(ConfigError):
        bank.register("t")
    with pytest.raises(ConfigError):
        bank["u"]


def test_short_training_run_reads_only_training_domains():
    torch.manual_seed(3)
    b = build_benchmark(default_benchmark_config(train_size=6, eval_size=2, image_size=(32, 32)))
    cfg = MTSTNConfig(epochs=2, steps_per_epoch=3, style_dim=8, blocks=1, base_width=4, disc_width=4)
    stn, hist = train_mtstn(b, cfg)
    assert len(hist.epochs) == 2
    assert all(np.isfinite(e["rec"]) for e in hist.epochs)
    assert b.unseen.train.key not in b.registry.read_set()
    assert stn.source == "synth" and stn.targets == ["hazy", "dusk"]
    assert style_gap(stn.styles, "hazy", "dusk") > 1e-6
    x = torch.rand(1, 3, 32, 32)
    assert not torch.equal(stn.net(x, stn.styles["hazy"]), stn.net(x, stn.styles["synth"]))
    out = stn.to_style(b.targets[0].eval.eval_images(), "synth")
    assert out.shape == (2, 32, 32, 3)


def test_channel_mean_distance():
    a = np.zeros((2, 4, 4, 3))
    b = np.ones((1, 4, 4, 3))
    assert channel_mean_distance(a, b) == pytest.approx(np.sqrt(3))
    assert channel_mean_distance(a, a) == 0.0
