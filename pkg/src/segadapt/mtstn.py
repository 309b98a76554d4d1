"""Multi-domain style transfer with one learnable (gamma, beta) style per domain.

A single transfer network is shared by all domains.  Every conditional
instance normalization (CIN) site inside it takes the same style vector, so a
domain's look is carried entirely by its style vector and switching the vector
switches the output style.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .errors import ConfigError, NumericAbort, ShapeError
from .losses import adv_negative, adv_positive, mtstn_adv, reconstruction

log = logging.getLogger(__name__)

CIN_EPS = 1e-5


@dataclass
class StyleVector:
    gamma: torch.Tensor
    beta: torch.Tensor


def cin(f, style, eps=CIN_EPS):
    """Conditional instance normalization: per-channel standardization, then gamma * . + beta."""
    gamma, beta = (style.gamma, style.beta) if isinstance(style, StyleVector) else style
    if f.dim() != 4 or f.shape[1] != gamma.shape[-1] or beta.shape[-1] != gamma.shape[-1]:
        raise ShapeError(f"CIN: feature map {tuple(f.shape)} does not match style width {gamma.shape[-1]}")
    mu = f.mean(dim=(2, 3), keepdim=True)
    var = f.var(dim=(2, 3), keepdim=True, unbiased=False)
    return gamma.view(1, -1, 1, 1) * (f - mu) / torch.sqrt(var + eps) + beta.view(1, -1, 1, 1)


class StyleBank(nn.Module):
    """Registry of per-domain style vectors, initialized to gamma=1, beta=0."""

    kind = "styles"

    def __init__(self, dim=64, names=()):
        super().__init__()
        self.dim = int(dim)
        self.gammas = nn.ParameterDict()
        self.betas = nn.ParameterDict()
        for n in names:
            self.register(n)

    @property
    def arch(self):
        return {"dim": self.dim, "names": list(self.gammas.keys())}

    def register(self, name):
        if name in self.gammas:
            raise ConfigError(f"style {name!r} already registered")
        dtype = next(iter(self.gammas.values())).dtype if len(self.gammas) else torch.get_default_dtype()
        self.gammas[name] = nn.Parameter(torch.ones(self.dim, dtype=dtype))
        self.betas[name] = nn.Parameter(torch.zeros(self.dim, dtype=dtype))

    def __contains__(self, name):
        return name in self.gammas

    def __getitem__(self, name):
        if name not in self.gammas:
            raise ConfigError(f"style {name!r} is not registered (known: {list(self.gammas.keys())})")
        return StyleVector(self.gammas[name], self.betas[name])

    def names(self):
        return list(self.gammas.keys())


class _ResBlock(nn.Module):
    def __init__(self, d):
        super().__init__()
        self.conv1 = nn.Conv2d(d, d, 3, padding=1, padding_mode="reflect")
        self.conv2 = nn.Conv2d(d, d, 3, padding=1, padding_mode="reflect")

    def forward(self, x, style, taps=None):
        h = cin(self.conv1(x), style)
        if taps is not None:
            taps.append(h)
        h = F.relu(h)
        h = cin(self.conv2(h), style)
        if taps is not None:
            taps.append(h)
        return x + h


class StyleNet(nn.Module):
    """Two stride-2 convolutions, residual blocks with CIN, two upsampling stages, sigmoid output."""

    kind = "stylenet"
    downsampling = 4

    def __init__(self, dim=64, blocks=3, base=32):
        super().__init__()
        self.arch = {"dim": int(dim), "blocks": int(blocks), "base": int(base)}
        self.down1 = nn.Conv2d(3, base, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(base, dim, 3, stride=2, padding=1)
        self.res = nn.ModuleList(_ResBlock(dim) for _ in range(blocks))
        self.up1 = nn.Conv2d(dim, base, 3, padding=1)
        self.up2 = nn.Conv2d(base, 3, 3, padding=1)

    @property
    def cin_sites(self):
        return 1 + 2 * len(self.res)

    def forward(self, x, style, taps=None):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected N x 3 x H x W input, got {tuple(x.shape)}")
        H, W = x.shape[-2:]
        if H % self.downsampling or W % self.downsampling:
            raise ShapeError(f"input size {H}x{W} is not divisible by {self.downsampling}")
        h = F.relu(self.down1(x - 0.5))
        h = cin(self.down2(h), style)
        if taps is not None:
            taps.append(h)
        h = F.relu(h)
        for block in self.res:
            h = block(h, style, taps)
        h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        h = F.relu(self.up1(h))
        h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        return torch.sigmoid(self.up2(h))


class ImageDiscriminator(nn.Module):
    """Four 4x4 stride-2 convolutions, global average pooling, sigmoid scalar."""

    kind = "image_discriminator"

    def __init__(self, width=16):
        super().__init__()
        self.arch = {"width": int(width)}
        w = width
        chans = [3, w, 2 * w, 4 * w, 4 * w]
        layers = []
        for cin_, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin_, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(chans[-1], 1)

    def logit(self, x):
        return self.head(self.features(x).mean(dim=(2, 3))).squeeze(1)

    def forward(self, x):
        return torch.sigmoid(self.logit(x))


checkpoint.register_kind(StyleBank.kind, StyleBank)
checkpoint.register_kind(StyleNet.kind, StyleNet)
checkpoint.register_kind(ImageDiscriminator.kind, ImageDiscriminator)


def transfer(style_net, x, style):
    """Render ``x`` in the given style.  Output is in [0, 1] with the input's size."""
    return style_net(x, style)


@dataclass
class MTSTN:
    net: StyleNet
    styles: StyleBank
    discriminators: nn.ModuleDict
    source: str

    @property
    def targets(self):
        return [n for n in self.styles.names() if n != self.source]

    @torch.no_grad()
    def to_style(self, images, style_name, batch=32):
        """Transfer an N x H x W x 3 numpy array into a style, returning the same layout."""
        style = self.styles[style_name]
        out = []
        for i in range(0, len(images), batch):
            x = torch.from_numpy(np.array(images[i:i + batch])).permute(0, 3, 1, 2).float()
            out.append(self.net(x, style).permute(0, 2, 3, 1).numpy())
        return np.concatenate(out) if out else np.zeros_like(images)

    def save(self, path, metadata=None):
        comps = {"net": self.net, "styles": self.styles}
        for n, d in self.discriminators.items():
            comps[f"disc_{n}"] = d
        meta = dict(metadata or {})
        meta["source"] = self.source
        meta["style_registry"] = self.styles.names()
        return checkpoint.save_checkpoint(comps, path, meta)

    @classmethod
    def load(cls, path):
        comps, meta = checkpoint.load_checkpoint(path)
        discs = nn.ModuleDict({k[len("disc_"):]: v for k, v in comps.items() if k.startswith("disc_")})
        return cls(comps["net"], comps["styles"], discs, meta["source"])


@dataclass
class MTSTNConfig:
    epochs: int = 2
    steps_per_epoch: int = 250
    lr_generator: float = 2.5e-4
    lr_discriminator: float = 1e-5
    weight_decay: float = 5e-5
    lambda_adv: float = 1e-3
    style_dim: int = 64
    blocks: int = 3
    base_width: int = 32
    disc_width: int = 16
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class MTSTNHistory:
    epochs: list = field(default_factory=list)  # per-epoch mean of rec, adv, d_value


def build_mtstn(domain_names, source, config: MTSTNConfig):
    torch.manual_seed(config.seed)
    net = StyleNet(config.style_dim, config.blocks, config.base_width)
    styles = StyleBank(config.style_dim, domain_names)
    discs = nn.ModuleDict({n: ImageDiscriminator(config.disc_width) for n in domain_names})
    return MTSTN(net, styles, discs, source)


def _to_tensor(arr):
    return torch.from_numpy(np.array(arr)).permute(0, 3, 1, 2).float()


def train_mtstn(benchmark, config: MTSTNConfig | None = None, progress=None, targets=None):
    """Alternate discriminator ascent on the adversarial value and generator descent on
    reconstruction + lambda_adv * adversarial value.  Each step sees one real image per
    training domain: the source and every entry of ``targets`` (default: the known
    targets, in which case the unseen domain is never read).
    """
    from .domains import IndexStream

    config = config or MTSTNConfig()
    names = [t.spec.name for t in benchmark.targets] if targets is None else list(targets)
    if not names:
        raise ConfigError("style transfer needs at least one target domain")
    source = benchmark.source.spec.name
    domains = [benchmark.source] + [benchmark.domain(n) for n in names]
    names = [d.spec.name for d in domains]
    model = build_mtstn(names, source, config)
    gen_params = list(model.net.parameters()) + list(model.styles.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=config.lr_generator, weight_decay=config.weight_decay)
    opt_d = torch.optim.Adam(model.discriminators.parameters(), lr=config.lr_discriminator, weight_decay=config.weight_decay)
    streams = {d.spec.name: IndexStream(len(d.train), config.seed, "mtstn/" + d.train.key) for d in domains}
    history = MTSTNHistory()

    for epoch in range(config.epochs):
        sums = np.zeros(3)
        for step in range(config.steps_per_epoch):
            batch = {d.spec.name: _to_tensor(d.train.images(streams[d.spec.name].take(1))) for d in domains}
            targets = [n for n in names if n != source]

            # discriminator step: ascend the adversarial value on detached transfers
            with torch.no_grad():
                fake_to_src = {t: model.net(batch[t], model.styles[source]) for t in targets}
                fake_to_tgt = {t: model.net(batch[source], model.styles[t]) for t in targets}
            for p in model.discriminators.parameters():
                p.requires_grad_(True)
            D = model.discriminators
            d_value = adv_positive(D[source](batch[source]))
            for t in targets:
                d_value = d_value + adv_negative(D[source](fake_to_src[t]))
                d_value = d_value + adv_positive(D[t](batch[t])) + adv_negative(D[t](fake_to_tgt[t]))
            opt_d.zero_grad()
            (-d_value).backward()
            opt_d.step()

            # generator step: reconstruction + weighted adversarial value, discriminators fixed
            for p in model.discriminators.parameters():
                p.requires_grad_(False)
            rec = sum(reconstruction(batch[n], model.net(batch[n], model.styles[n])) for n in names)
            adv, _ = mtstn_adv(batch, model.net, model.styles, D, source)
            loss = rec + config.lambda_adv * adv
            if not torch.isfinite(loss):
                raise NumericAbort(
                    f"non-finite style transfer loss at epoch {epoch} step {step}",
                    {"rec": rec.item(), "adv": adv.item(), "d_value": d_value.item()},
                )
            opt_g.zero_grad()
            loss.backward()
            opt_g.step()
            sums += [rec.item(), adv.item(), d_value.item()]
        means = sums / config.steps_per_epoch
        history.epochs.append({"epoch": epoch, "rec": means[0], "adv": means[1], "d_value": means[2]})
        log.info("mtstn epoch %d rec=%.4f adv=%.4f", epoch, means[0], means[1])
        if progress:
            progress(history.epochs[-1])
    for p in model.discriminators.parameters():
        p.requires_grad_(True)
    return model, history


def channel_mean_distance(images_a, images_b):
    """Euclidean distance between the per-channel mean colors of two image sets (N x H x W x 3)."""
    return float(np.linalg.norm(images_a.reshape(-1, 3).mean(0) - images_b.reshape(-1, 3).mean(0)))


def style_gap(styles: StyleBank, a, b):
    va, vb = styles[a], styles[b]
    return math.sqrt((((va.gamma - vb.gamma) ** 2).sum() + ((va.beta - vb.beta) ** 2).sum()).item())
