"""Loss terms for self-distillation, output-space and image-space adversarial learning.

Conventions: predictions are N x C x H x W probability maps; discriminators
return one probability per image.  A discriminator output D(.) is the
probability that its input is *not* from the reference domain: for the
output-space discriminator that means "target domain", for an image
discriminator of domain a it means "transferred into a".  Expectations are
minibatch means.
"""

from __future__ import annotations

import torch

from .errors import ConfigError, ContractError, ShapeError

EPS = 1e-7


def _clamp(p):
    return p.clamp(EPS, 1.0 - EPS)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def one_hot(labels, num_classes):
    """N x H x W integer labels -> N x C x H x W one-hot float tensor."""
    oh = torch.nn.functional.one_hot(labels.long(), num_classes)
    return oh.permute(0, 3, 1, 2).to(torch.get_default_dtype())


def cross_entropy(y, q):
    """Mean over pixels of -log q at the true class; ``y`` is one-hot (N x C x H x W)."""
    _same_shape(y, q, "cross_entropy")
    if not torch.all((y == 0) | (y == 1)) or not torch.all(y.sum(dim=1) == 1):
        raise ValueError("cross_entropy expects a one-hot label map")
    return -(y * torch.log(_clamp(q))).sum(dim=1).mean()


def cross_entropy_labels(labels, q):
    """Same as :func:`cross_entropy` but with an integer label map."""
    if labels.shape != (q.shape[0], *q.shape[2:]):
        raise ShapeError(f"cross_entropy: labels {tuple(labels.shape)} do not match predictions {tuple(q.shape)}")
    picked = torch.gather(q, 1, labels.long().unsqueeze(1)).squeeze(1)
    return -torch.log(_clamp(picked)).mean()


def consistency(q_student, q_teacher):
    """Per-pixel squared L2 distance between class distributions, averaged over pixels.

    The teacher side is detached, so gradients reach the student only.
    """
    _same_shape(q_student, q_teacher, "consistency")
    return ((q_student - q_teacher.detach()) ** 2).sum(dim=1).mean()


def frozen_consistency(q_student, q_frozen_teacher):
    """Consistency against a teacher that is never EMA-updated (ablation baseline)."""
    return consistency(q_student, q_frozen_teacher)


def adv_positive(d):
    """log(1 - D) averaged over the batch."""
    return torch.log1p(-_clamp(d)).mean()


def adv_negative(d):
    """log D averaged over the batch."""
    return torch.log(_clamp(d)).mean()


def mtkd_output_adv(pred_source, preds_targets, d_out):
    """Output-space adversarial value: positive term on the source, negative on each target."""
    if len(preds_targets) == 0:
        raise ValueError("mtkd_output_adv needs at least one target prediction")
    value = adv_positive(d_out(pred_source))
    for q in preds_targets:
        value = value + adv_negative(d_out(q))
    return value


def mtkd_student_adv(preds_targets, d_out):
    """The target-side (negative) terms only, i.e. what the student minimizes to fool D."""
    return sum(adv_negative(d_out(q)) for q in preds_targets)


def utkd_one_way(pred_unseen, d_out_frozen):
    """One-way adversarial loss against a frozen discriminator."""
    trainable = [n for n, p in d_out_frozen.named_parameters() if p.requires_grad]
    if trainable:
        raise ContractError(f"one-way adversarial loss needs a frozen discriminator; trainable: {trainable[:3]}...")
    return adv_negative(d_out_frozen(pred_unseen))


def reconstruction(x, x_hat):
    """Mean absolute error over all pixels and channels."""
    _same_shape(x, x_hat, "reconstruction")
    return (x - x_hat).abs().mean()


def mtkd_objective(ce, con, out, lambda_con=100.0, lambda_out=1e-3):
    return ce + lambda_con * con + lambda_out * out


def utkd_objective(con, out, lambda_con=100.0, lambda_out=1e-3):
    return lambda_con * con + lambda_out * out


def mtstn_adv(images, style_net, styles, discriminators, source):
    """Cross-domain image adversarial value for a style transfer network.

    ``images`` maps domain name -> real image batch, ``styles`` is a
    :class:`~segadapt.mtstn.StyleBank`, ``discriminators`` maps domain name ->
    image discriminator.  Real images of a domain are positive for that
    domain's discriminator; images transferred into a domain are negative.
    Returns ``(value, terms)`` where ``terms`` lists the individual summands.
    """
    for name in images:
        if name not in styles:
            raise ConfigError(f"style {name!r} is not registered")
        if name not in discriminators:
            raise ConfigError(f"no discriminator for domain {name!r}")
    targets = [n for n in images if n != source]
    x_s = images[source]
    terms = [adv_positive(discriminators[source](x_s))]
    for t in targets:
        terms.append(adv_negative(discriminators[source](style_net(images[t], styles[source]))))
    for t in targets:
        terms.append(adv_positive(discriminators[t](images[t])))
        terms.append(adv_negative(discriminators[t](style_net(x_s, styles[t]))))
    return sum(terms), terms
