"""Desk-scale gradient check of the full composite loss."""

from __future__ import annotations

import numpy as np

from .gradcheck import GradReport, grad_check
from .model import ModelConfig, forward, init_params
from .training import cross_entropy, median_bandwidth, mmd_domain_loss, total_loss

DESK_CONFIG = ModelConfig(d=8, heads=2, L_self=2, L_cross=1, ff_mult=4, dropout_rate=0.0, C=2, p=16, f=6, K=3, N=8)


def desk_problem(seed: int, cfg: ModelConfig = DESK_CONFIG, batch: int = 4):
    """Random parameters plus a small two-domain batch of tokens."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    fmri = rng.normal(size=(batch, cfg.N, cfg.p))
    meta = rng.normal(size=(batch, cfg.K, cfg.f))
    labels = np.arange(batch) % cfg.C
    domains = ["a" if i < batch // 2 else "b" for i in range(batch)]
    return params, fmri, meta, labels, domains


def composite_loss_fn(cfg, fmri, meta, labels, domains, lam, bandwidth):
    def loss(params):
        out = forward(params, cfg, fmri, meta, training=False)
        l_da, _ = mmd_domain_loss(out.fused, domains, bandwidth)
        return total_loss(cross_entropy(out.probs, labels), l_da, lam)
    return loss


def desk_gradcheck(seed: int = 0, eps: float = 1e-5, lam: float = 0.1, cfg: ModelConfig = DESK_CONFIG) -> GradReport:
    """Central-difference check of L_CE + lam * L_DA over every model parameter.

    The MMD bandwidth is fixed at the median heuristic of the unperturbed
    batch; a bandwidth recomputed per probe would not be differentiated.
    """
    params, fmri, meta, labels, domains = desk_problem(seed, cfg)
    fused = forward(params, cfg, fmri, meta, training=False).fused.data
    f = composite_loss_fn(cfg, fmri, meta, labels, domains, lam, median_bandwidth(fused))
    return grad_check(f, params, eps)
