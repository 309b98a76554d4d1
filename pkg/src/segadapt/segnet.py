"""Segmentation network, output-space discriminator and the EMA teacher rule."""

from __future__ import annotations

import copy

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


class SegNet(nn.Module):
    """Small encoder-decoder mapping an RGB image to per-pixel class probabilities.

    Encoder: four 3x3 conv stages of widths ``widths`` with stride-2
    downsampling on the second and third stage.  Decoder: two bilinear
    upsampling steps, each fused with the matching encoder feature, then a
    1x1 projection to ``num_classes`` logits and a softmax over classes.
    """

    kind = "segnet"
    downsampling = 4

    def __init__(self, num_classes=7, widths=(16, 32, 64, 64), decoder_width=32, norm="none"):
        super().__init__()
        if norm not in ("none", "group"):
            raise ConfigError(f"norm must be 'none' or 'group', got {norm!r}")
        w1, w2, w3, w4 = widths
        self.arch = {"num_classes": int(num_classes), "widths": list(widths), "decoder_width": int(decoder_width),
                     "norm": norm}
        self.enc1 = nn.Conv2d(3, w1, 3, padding=1)
        self.enc2 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.enc3 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.enc4 = nn.Conv2d(w3, w4, 3, padding=1)
        self.dec1 = nn.Conv2d(w4 + w2, decoder_width, 3, padding=1)
        self.dec2 = nn.Conv2d(decoder_width + w1, decoder_width, 3, padding=1)
        self.classifier = nn.Conv2d(decoder_width, num_classes, 1)
        widths_out = {"enc1": w1, "enc2": w2, "enc3": w3, "enc4": w4, "dec1": decoder_width, "dec2": decoder_width}
        if norm == "group":
            self.norms = nn.ModuleDict({k: nn.GroupNorm(4, c) for k, c in widths_out.items()})
        else:
            self.norms = None

    @property
    def num_classes(self):
        return self.arch["num_classes"]

    def logits(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected N x 3 x H x W input, got {tuple(x.shape)}")
        H, W = x.shape[-2:]
        if H % self.downsampling or W % self.downsampling:
            raise ShapeError(f"input size {H}x{W} is not divisible by {self.downsampling}")
        x = x - 0.5
        f1 = self._act("enc1", x)
        f2 = self._act("enc2", f1)
        f3 = self._act("enc3", f2)
        f4 = self._act("enc4", f3)
        u = F.interpolate(f4, size=f2.shape[-2:], mode="bilinear", align_corners=False)
        u = self._act("dec1", torch.cat([u, f2], 1))
        u = F.interpolate(u, size=f1.shape[-2:], mode="bilinear", align_corners=False)
        u = self._act("dec2", torch.cat([u, f1], 1))
        return self.classifier(u)

    def _act(self, name, x):
        y = getattr(self, name)(x)
        if self.norms is not None:
            y = self.norms[name](y)
        return F.relu(y)

    def forward(self, x):
        return F.softmax(self.logits(x), dim=1)


class OutputDiscriminator(nn.Module):
    """DCGAN-style classifier over probability maps: five 4x4 stride-2 convolutions.

    The last convolution yields a coarse logit map which is averaged to one
    logit per image.  The returned value is the probability that the input map
    came from a *target* domain.
    """

    kind = "output_discriminator"

    def __init__(self, num_classes=7, width=16):
        super().__init__()
        self.arch = {"num_classes": int(num_classes), "width": int(width)}
        w = width
        chans = [num_classes, w, 2 * w, 4 * w, 4 * w]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        layers.append(nn.Conv2d(chans[-1], 1, 4, stride=2, padding=1))
        self.net = nn.Sequential(*layers)

    def logit(self, q):
        if q.dim() != 4 or q.shape[1] != self.arch["num_classes"]:
            raise ShapeError(f"expected N x {self.arch['num_classes']} x H x W probabilities, got {tuple(q.shape)}")
        return self.net(q).mean(dim=(1, 2, 3))

    def forward(self, q):
        return torch.sigmoid(self.logit(q))


def _check_same_arch(a, b):
    if type(a) is not type(b) or getattr(a, "arch", None) != getattr(b, "arch", None):
        raise ShapeError("teacher and student architectures differ")
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        if na != nb or pa.shape != pb.shape:
            raise ShapeError(f"parameter mismatch: {na} {tuple(pa.shape)} vs {nb} {tuple(pb.shape)}")


@torch.no_grad()
def ema_update(teacher, student, alpha):
    """teacher <- alpha * teacher + (1 - alpha) * student, parameter by parameter."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    _check_same_arch(teacher, student)
    for t, s in zip(teacher.state_dict().values(), student.state_dict().values()):
        if t.dtype.is_floating_point:
            if alpha == 1.0:
                continue
            if alpha == 0.0:
                t.copy_(s)
            else:
                t.mul_(alpha).add_(s, alpha=1.0 - alpha)
    return teacher


def clone(model):
    return copy.deepcopy(model)


def freeze(module):
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def parameter_hash(module):
    import hashlib

    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
