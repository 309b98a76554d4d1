"""CutMix with pseudo-label mixing, Gaussian noise, and the student/teacher view builders."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ShapeError

AUGMENTATIONS = ("cutmix", "gaussian", "none")
TEACHER_VIEWS = ("raw", "transferred")


@dataclass(frozen=True)
class CutMask:
    """mask[i, j] == 1 keeps the first input, 0 takes the second (inside ``box``)."""

    mask: np.ndarray
    box: tuple[int, int, int, int]  # top, left, height, width

    @property
    def area(self):
        return self.box[2] * self.box[3]

    def tensor(self, like):
        return torch.from_numpy(self.mask).to(dtype=torch.bool, device=like.device)


def cutmix_box_size(H, W, log_aspect):
    """Box height and width for a half-area box with aspect ratio exp(log_aspect) = h / w."""
    target = H * W / 2.0
    h = int(round(math.sqrt(target * math.exp(log_aspect))))
    h = min(max(h, 1), H)
    w = min(max(int(round(target / h)), 1), W)
    return h, w


def sample_cutmix_mask(H, W, rng) -> CutMask:
    if H < 8 or W < 8:
        raise ShapeError(f"cutmix needs at least 8x8 images, got {H}x{W}")
    log_aspect = rng.uniform(math.log(0.5), math.log(2.0))
    h, w = cutmix_box_size(H, W, log_aspect)
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    mask = np.ones((H, W), dtype=np.float32)
    mask[top:top + h, left:left + w] = 0.0
    return CutMask(mask, (top, left, h, w))


def full_mask(H, W, value=1.0) -> CutMask:
    """Degenerate masks: all ones (keep first input) or all zeros (take second)."""
    mask = np.full((H, W), value, dtype=np.float32)
    box = (0, 0, 0, 0) if value == 1.0 else (0, 0, H, W)
    return CutMask(mask, box)


def cutmix(x1, x2, q1, q2, m: CutMask):
    """Composite two images and their predictions with one binary mask.

    Pixels are copied, never interpolated, so every output pixel comes from
    exactly one of the inputs and mixed pseudo-labels stay row-stochastic.
    """
    if x1.shape != x2.shape or q1.shape != q2.shape or x1.shape[-2:] != q1.shape[-2:]:
        raise ShapeError("cutmix inputs must share spatial shape")
    if tuple(m.mask.shape) != tuple(x1.shape[-2:]):
        raise ShapeError(f"mask {m.mask.shape} does not match images {tuple(x1.shape[-2:])}")
    keep = m.tensor(x1)
    return torch.where(keep, x1, x2), torch.where(keep, q1, q2)


def gaussian_noise(x, sigma, rng):
    """Additive N(0, sigma^2) noise, clipped to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return x.clone()
    noise = torch.from_numpy(rng.normal(0.0, sigma, size=tuple(x.shape))).to(x.dtype)
    return (x + noise).clamp(0.0, 1.0)


def _pair_views(x_a, x_b, teacher, rng, student_a, student_b, teacher_a, teacher_b, kind, noise_sigma, mask):
    with torch.no_grad():
        q = teacher(torch.cat([teacher_a, teacher_b]))
    q_a, q_b = q[: len(x_a)], q[len(x_a):]
    if kind == "cutmix":
        m = mask if mask is not None else sample_cutmix_mask(*x_a.shape[-2:], rng)
        return cutmix(student_a, student_b, q_a, q_b, m)
    if kind == "gaussian":
        return gaussian_noise(student_a, noise_sigma, rng), q_a
    if kind == "none":
        return student_a, q_a
    raise ConfigError(f"unknown augmentation {kind!r}; choose from {AUGMENTATIONS}")


def compose_mtkd(x_a, x_b, teacher, rng, style_net=None, style=None, transferred=None,
                 teacher_view="raw", kind="cutmix", noise_sigma=0.1, mask=None):
    """Student input and mixed pseudo label for two images of one target domain.

    Both images are first moved to the source style, either by running
    ``style_net`` with ``style`` or by passing precomputed ``transferred``
    (a pair of tensors).  With neither, the images are used as is.  The
    teacher sees the raw images (``teacher_view="raw"``) or the transferred
    ones, never the mixed one, and carries no gradient.
    """
    if teacher_view not in TEACHER_VIEWS:
        raise ConfigError(f"unknown teacher_view {teacher_view!r}")
    if transferred is not None:
        t_a, t_b = transferred
    elif style_net is not None:
        if style is None:
            raise ConfigError("style transfer requested without a registered source style")
        with torch.no_grad():
            t_a, t_b = style_net(x_a, style), style_net(x_b, style)
    else:
        t_a, t_b = x_a, x_b
    if teacher_view == "raw":
        v_a, v_b = x_a, x_b
    else:
        v_a, v_b = t_a, t_b
    return _pair_views(x_a, x_b, teacher, rng, t_a, t_b, v_a, v_b, kind, noise_sigma, mask)


def compose_utkd(x_a, x_b, teacher, rng, kind="cutmix", noise_sigma=0.1, mask=None):
    """As :func:`compose_mtkd` without any style transfer."""
    return _pair_views(x_a, x_b, teacher, rng, x_a, x_b, x_a, x_b, kind, noise_sigma, mask)
