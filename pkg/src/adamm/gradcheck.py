"""Central finite-difference verification of the analytic gradients.

Each check builds a tiny double-precision instance (grids of at most 5^3
voxels for the loss/refinement ops), picks a scalar objective, and compares
autograd against central differences at a handful of random coordinates.
"""

from __future__ import annotations

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig
from .bbdm import Discriminator, adversarial_loss, gram_triple, gsme_loss
from .garm import GarmModule, threshold_adjacency, soft_assign, scale_align, cross_gcn
from .lgrm import PresenceHead, weighted_dice_loss
from .volumes import ModalityCombination

DEFAULT_TOL = {torch.float64: 1e-4, torch.float32: 1e-2}
_FD_STEP = {torch.float64: 1e-5, torch.float32: 3e-3}


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradient(fn, target: torch.Tensor, num_coords: int = 6, seed: int = 0) -> float:
    """Max relative error between autograd and central differences on ``target``.

    ``fn`` must return a scalar recomputed from the current value of
    ``target`` (a leaf tensor with requires_grad).
    """
    if target.grad is not None:
        target.grad = None
    loss = fn()
    loss.backward()
    grad = target.grad.detach().reshape(-1).clone()
    rng = np.random.default_rng(seed)
    flat_count = target.numel()
    coords = rng.choice(flat_count, size=min(num_coords, flat_count), replace=False)
    h = _FD_STEP[target.dtype]
    worst = 0.0
    flat = target.data.view(-1)  # view, so writes hit the live tensor
    for c in coords:
        c = int(c)
        original = flat[c].item()
        with torch.no_grad():
            flat[c] = original + h
            up = float(fn())
            flat[c] = original - h
            down = float(fn())
            flat[c] = original
        fd = (up - down) / (2.0 * h)
        worst = max(worst, relative_error(fd, float(grad[c])))
    return worst


def _check_gsme(dtype):
    torch.manual_seed(11)
    n = 2 * 2 * 2
    t_enc, t_bot, t_dec = (torch.randn(c, 2, 2, 2, dtype=dtype) for c in (5, 4, 4))
    s_bot = torch.randn(4, 2, 2, 2, dtype=dtype)
    s_dec = torch.randn(4, 2, 2, 2, dtype=dtype)
    s_enc = torch.randn(5, 2, 2, 2, dtype=dtype, requires_grad=True)

    def fn():
        t_triple = gram_triple(t_enc, t_bot, t_dec)
        s_triple = gram_triple(s_enc, s_bot, s_dec)
        return gsme_loss(t_triple, s_triple, theta=1.3)

    return check_gradient(fn, s_enc)


def _check_adversarial(dtype):
    probs = torch.tensor([0.37, 0.62], dtype=dtype, requires_grad=True)

    def fn():
        return adversarial_loss(probs[0], probs[1])

    return check_gradient(fn, probs, num_coords=2)


def _check_weighted_dice(dtype):
    torch.manual_seed(12)
    seg = torch.rand(3, 4, 4, 4, dtype=dtype) * 0.9 + 0.05
    seg.requires_grad_(True)
    target = (torch.rand(3, 4, 4, 4, dtype=dtype) > 0.6).to(dtype)
    weights = torch.tensor([1.2, 1.7, 1.05], dtype=dtype)

    def fn():
        return weighted_dice_loss(seg, target, weights)

    return check_gradient(fn, seg)


def _check_presence_head(dtype):
    torch.manual_seed(13)
    head = PresenceHead(4).to(dtype)
    head.train()
    u2 = torch.randn(1, 4, 4, 4, 4, dtype=dtype, requires_grad=True)
    probe = torch.randn(3, dtype=dtype)

    def fn():
        return (head(u2)[0] * probe).sum()

    err_input = check_gradient(fn, u2)
    weight = head.conv.weight
    weight.requires_grad_(True)
    err_weight = check_gradient(fn, weight)
    return max(err_input, err_weight)


def _garm_with_margin(dtype, channels=4, anchors=3):
    """A randomized refinement module whose cosine threshold has a safe margin."""
    for seed in range(64):
        torch.manual_seed(40 + seed)
        module = GarmModule(channels, num_anchors=anchors, tau=0.8).to(dtype)
        with torch.no_grad():
            for conv in (module.refine.conv0, module.refine.conv1, module.refine.conv2):
                conv.weight.normal_(0, 0.5)
                conv.bias.normal_(0, 0.1)
        feat_g = torch.randn(channels, 3, 3, 3, dtype=dtype)
        feat_c = torch.randn(channels, 3, 3, 3, dtype=dtype)
        with torch.no_grad():
            rep_g = soft_assign(feat_g, module.graph_g)
            rep_c = soft_assign(feat_c, module.graph_c)
            aligned = scale_align(rep_c.nodes, module.scale.weight)
            prop_g, prop_c, _ = cross_gcn(rep_g.nodes, aligned, module.gcn)
            unit_g = prop_g / prop_g.norm(dim=1, keepdim=True)
            unit_c = prop_c / prop_c.norm(dim=1, keepdim=True)
            margin = ((unit_g @ unit_c.T) - module.tau).abs().min()
        if margin > 1e-2:
            return module, feat_g, feat_c
    raise RuntimeError("no threshold-safe refinement instance found")


def _check_garm(dtype):
    module, feat_g, feat_c = _garm_with_margin(dtype)
    probe = torch.randn(feat_g.shape, dtype=dtype)

    def fn():
        return (module.forward_single(feat_g, feat_c) * probe).sum()

    err_anchor = check_gradient(fn, module.graph_g.anchors)
    feat_g.requires_grad_(True)
    err_input = check_gradient(fn, feat_g)
    return max(err_anchor, err_input)


def _check_backbone(dtype):
    torch.manual_seed(15)
    cfg = BackboneConfig(base_channels=2)
    net = Backbone(cfg, with_adapters=False).to(dtype)
    net.train()
    combo = ModalityCombination.from_code("1111")
    # 16^3 keeps train-mode batch norm happy (the 1/8-grid bottleneck is 2^3).
    x = torch.randn(1, 4, 16, 16, 16, dtype=dtype)
    probe = torch.randn(1, 3, 16, 16, 16, dtype=dtype)

    def fn():
        bundle = net.decode(net.encode(x, combo), combo)
        return (bundle.logits * probe).sum()

    weight = net.down1.conv.weight
    return check_gradient(fn, weight, num_coords=4)


def _check_discriminator(dtype):
    torch.manual_seed(16)
    disc = Discriminator(4).to(dtype)
    feat = torch.randn(1, 4, 4, 4, 4, dtype=dtype, requires_grad=True)

    def fn():
        return disc(feat).sum()

    return check_gradient(fn, feat)


CHECKS = (
    ("gsme_loss", _check_gsme),
    ("adversarial_loss", _check_adversarial),
    ("weighted_dice_loss", _check_weighted_dice),
    ("presence_head", _check_presence_head),
    ("garm_forward", _check_garm),
    ("backbone", _check_backbone),
    ("discriminator", _check_discriminator),
)


def run_suite(dtype=torch.float64, tol: float = None) -> list:
    """Run every check; returns [(name, max_rel_error, passed)]."""
    tol = DEFAULT_TOL[dtype] if tol is None else tol
    results = []
    for name, check in CHECKS:
        err = check(dtype)
        results.append((name, err, err <= tol))
    return results
