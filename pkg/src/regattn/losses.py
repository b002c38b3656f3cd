"""Adversarial and perceptual self-regularization losses.

The discriminator objective is the usual minimisation form
``-log D(y) - log(1 - D(G(x)))`` and the generator uses the non-saturating
``-log D(G(x))``. All patch grids are reduced by the mean.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError

LOG_EPS = math.log(1e-12)
DEFAULT_REG_WEIGHTS = (1.0 / 32, 1.0 / 16, 1.0 / 8)


def _neg_log_sigmoid(z):
    # -log(max(sigmoid(z), 1e-12)), computed through logsigmoid
    return -torch.clamp(F.logsigmoid(z), min=LOG_EPS)


def d_loss(real_logits, fake_logits):
    """Discriminator loss; 2 ln 2 when both logit grids are zero."""
    return _neg_log_sigmoid(real_logits).mean() + _neg_log_sigmoid(-fake_logits).mean()


def g_adv_loss(fake_logits):
    return _neg_log_sigmoid(fake_logits).mean()


def perceptual_reg(x, gx, extractor, weights=DEFAULT_REG_WEIGHTS, x_features=None):
    """Weighted feature-space distance between ``x`` and ``gx``.

    For each layer l: w_l**2 * mean over (n, h, w) of the channel-summed squared
    feature difference. ``extractor`` maps a batch to an ordered
    ``{layer: tensor}`` dict; ``x_features`` can be passed to reuse a forward.
    """
    if x.shape != gx.shape:
        raise InputError(f"x {tuple(x.shape)} and gx {tuple(gx.shape)} differ")
    weights = tuple(float(w) for w in weights)
    fx = extractor(x) if x_features is None else x_features
    fg = extractor(gx)
    if len(weights) != len(fx):
        raise ConfigError(f"{len(weights)} reg weights for {len(fx)} feature layers")
    if any(w <= 0 for w in weights):
        raise ConfigError("reg weights must be positive")
    total = gx.new_zeros(())
    for w, a, b in zip(weights, fx.values(), fg.values()):
        total = total + (w * (a - b)).pow(2).sum(dim=1).mean()
    return total


@dataclass
class LossBreakdown:
    adv: float
    reg: float
    lam: float
    total: float

    def as_dict(self):
        return {"adv": self.adv, "reg": self.reg, "lambda": self.lam, "total": self.total}


def total_g_loss(fake_logits, x, gx, lam, extractor, weights=DEFAULT_REG_WEIGHTS,
                 x_features=None):
    """Return ``(total_tensor, LossBreakdown)`` for adv + lam * reg.

    The regularizer is skipped when ``lam == 0`` (it cannot affect the total).
    """
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    adv = g_adv_loss(fake_logits)
    if lam > 0:
        reg = perceptual_reg(x, gx, extractor, weights, x_features)
    else:
        with torch.no_grad():
            reg = perceptual_reg(x, gx, extractor, weights, x_features)
    total = adv + lam * reg if lam > 0 else adv
    return total, LossBreakdown(float(adv.detach()), float(reg.detach()), float(lam), float(total.detach()))
