"""Finite-difference gradient verification suites.

Each suite returns :class:`GradCheckRow` entries, one per (case, seed).
Inputs are small random tensors; every scalar objective is a random
projection of the op output, so no coordinate of the output is ignored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .attention import GcaConfig, GroupedCoordAttention, make_attention
from .config import ModelConfig
from .losses import ce_loss, combined_loss, dice_loss
from .model import build_model
from .tensor import Tensor, grad_check, grad_check_params

TOLERANCE = 1e-3
TARGETS = ("ops", "gca", "attention", "model")


@dataclass
class GradCheckRow:
    target: str
    case: str
    seed: int
    error: float
    checked: int
    frozen: int
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol)


def _normal(rng, shape, scale=1.0):
    return scale * rng.standard_normal(shape)


def _run(target, case, seed, x_fn, x, params_fn=None, params=None, eps=1e-3, n_coords=None,
         rng=None) -> GradCheckRow:
    stats = {}
    worst = grad_check(x_fn, x, eps=eps, n_coords=n_coords, rng=rng, stats=stats) if x is not None else 0.0
    if params:
        errs = grad_check_params(params_fn, params, eps=eps, n_coords=n_coords, rng=rng, stats=stats)
        worst = max([worst, *errs.values()])
    checked = sum(s["checked"] for s in stats.values())
    frozen = sum(s["frozen"] for s in stats.values())
    return GradCheckRow(target, case, seed, float(worst), checked, frozen)


def _randomize(module, rng) -> None:
    """Move BN affine terms and biases off their identity initial values."""
    for sub in module.modules():
        if isinstance(sub, nn.BatchNorm2d):
            c = sub.weight.shape[1]
            sub.weight.data = (1.0 + _normal(rng, (1, c, 1, 1), 0.3)).astype(np.float32)
            sub.bias.data = _normal(rng, (1, c, 1, 1), 0.3).astype(np.float32)
        elif isinstance(sub, nn.Conv2d) and sub.bias is not None:
            sub.bias.data = _normal(rng, sub.bias.shape, 0.1).astype(np.float32)


def check_ops(seed: int, eps: float = 1e-3) -> list:
    rng = np.random.default_rng(seed)
    rows = []

    def add(case, fn, shape, out_shape=None, params=None, x=None):
        x = x if x is not None else _normal(rng, shape)
        proj = _normal(rng, out_shape or shape)
        xt = Tensor(x)
        rows.append(_run("ops", case, seed, lambda t: T.sum(fn(t) * proj), x,
                         lambda: T.sum(fn(xt) * proj), params, eps=eps))

    w = Tensor(_normal(rng, (4, 2, 3, 3)), requires_grad=True)
    b = Tensor(_normal(rng, (1, 4, 1, 1)), requires_grad=True)
    add("conv2d", lambda t: nn.conv2d(t, w, b, stride=2, padding=1, groups=2), (2, 4, 5, 5),
        (2, 4, 3, 3), {"weight": w, "bias": b})
    w1 = Tensor(_normal(rng, (6, 4, 1, 1)), requires_grad=True)
    add("conv2d_1x1", lambda t: nn.conv2d(t, w1), (2, 4, 3, 3), (2, 6, 3, 3), {"weight": w1})
    for training in (True, False):
        bn = nn.BatchNorm2d(3)
        _randomize(bn, rng)
        bn.running_mean.data = _normal(rng, (1, 3, 1, 1), 0.5).astype(np.float32)
        bn.running_var.data = (1.0 + rng.random((1, 3, 1, 1))).astype(np.float32)
        bn.train(training)
        add(f"batchnorm_{'train' if training else 'eval'}", bn, (2, 3, 3, 3),
            params={"gamma": bn.weight, "beta": bn.bias})
    add("bilinear_upsample_x2", nn.bilinear_upsample_x2, (1, 2, 3, 4), (1, 2, 6, 8))
    add("maxpool2d_3x3_s2", nn.maxpool2d_3x3_s2, (1, 2, 7, 6), (1, 2, 4, 3))
    add("relu", nn.relu, (2, 3, 3, 3))
    add("sigmoid", nn.sigmoid, (2, 3, 3, 3))
    add("softmax", nn.softmax_c, (2, 4, 3, 3))
    add("log_softmax", nn.log_softmax_c, (2, 4, 3, 3))
    other = Tensor(_normal(rng, (2, 1, 3, 1)), requires_grad=True)
    add("broadcast_mul", lambda t: T.broadcast_mul(t, other), (2, 3, 3, 4), params={"other": other})
    add("reduce_mean_w", lambda t: T.reduce_axis(t, "W", "mean"), (2, 3, 4, 5), (2, 3, 4, 1))
    add("reduce_max_h", lambda t: T.reduce_axis(t, "H", "max"), (2, 3, 4, 5), (2, 3, 1, 5))
    add("concat_split", lambda t: T.concat(T.split(t, [1, 3], "C")[::-1], "C"), (2, 4, 3, 3))
    add("transpose_hw", T.transpose_hw, (2, 3, 4, 5), (2, 3, 5, 4))
    target = rng.integers(0, 4, (2, 3, 3))
    for name, loss in (("ce_loss", ce_loss), ("dice_loss", dice_loss)):
        x = _normal(rng, (2, 4, 3, 3))
        rows.append(_run("ops", name, seed, lambda t, loss=loss: loss(t, target), x, eps=eps))
    return rows


def _module_check(target, case, module, shape, seed, eps, n_coords=None) -> GradCheckRow:
    rng = np.random.default_rng(seed + 1000)
    _randomize(module, rng)
    x = _normal(rng, shape)
    proj = _normal(rng, shape)
    xt = Tensor(x)
    return _run(target, case, seed, lambda t: T.sum(module(t) * proj), x,
                lambda: T.sum(module(xt) * proj), dict(module.named_parameters()),
                eps=eps, n_coords=n_coords, rng=np.random.default_rng(seed))


def check_gca(seed: int, eps: float = 1e-3) -> list:
    rows = []
    for pooling in ("avg", "max", "both"):
        cfg = GcaConfig(groups=2, reduction=2, pooling=pooling)
        m = GroupedCoordAttention(8, cfg, np.random.default_rng(seed))
        rows.append(_module_check("gca", f"gca_G2_r2_{pooling}", m, (2, 8, 6, 6), seed, eps))
    shared = GroupedCoordAttention(8, GcaConfig(share_across_groups=True), np.random.default_rng(seed))
    rows.append(_module_check("gca", "gca_shared", shared, (2, 8, 6, 6), seed, eps))
    return rows


def check_attention(seed: int, eps: float = 1e-3) -> list:
    rows = []
    for kind in ("SE", "CBAM", "CoordAtt"):
        m = make_attention(kind, 16, rng=np.random.default_rng(seed))
        rows.append(_module_check("attention", kind, m, (2, 16, 6, 6), seed, eps, n_coords=60))
    return rows


def desk_model_config(**overrides) -> ModelConfig:
    return ModelConfig(**{"width_scale": "1/4", "num_classes": 4, **overrides})


def check_model(seed: int, eps: float = 1e-3, x_coords: int = 6, param_tensors: int = 10,
                cfg: ModelConfig | None = None, size: int = 64) -> list:
    """Train-mode desk-scale model under the combined loss.

    Checks ``x_coords`` input coordinates and one coordinate in each of
    ``param_tensors`` randomly drawn parameter tensors (always including
    one attention tensor when attention is on).
    """
    cfg = cfg or desk_model_config()
    rng = np.random.default_rng(seed)
    model = build_model(cfg, seed)
    model.train()
    x = rng.random((2, cfg.in_channels, size, size))
    target = rng.integers(0, cfg.num_classes, (2, size, size))
    named = list(model.named_parameters())
    picks = set(rng.choice(len(named), size=min(param_tensors, len(named)), replace=False).tolist())
    attn = [i for i, (n, _) in enumerate(named) if ".attn." in n]
    if attn and not picks & set(attn):
        picks.add(int(rng.choice(attn)))
    params = {named[i][0]: named[i][1] for i in sorted(picks)}
    xt = Tensor(x)
    stats = {}
    worst = grad_check(lambda t: combined_loss(model(t), target), x, eps=eps, n_coords=x_coords,
                       rng=rng, stats=stats)
    errs = grad_check_params(lambda: combined_loss(model(xt), target), params, eps=eps, n_coords=1,
                             rng=rng, stats=stats)
    worst = max([worst, *errs.values()])
    return [GradCheckRow("model", f"desk_{cfg.attention}", seed, float(worst),
                         sum(s["checked"] for s in stats.values()),
                         sum(s["frozen"] for s in stats.values()))]


SUITES = {"ops": check_ops, "gca": check_gca, "attention": check_attention, "model": check_model}


def run_suite(target: str, seeds, eps: float = 1e-3) -> list:
    if target not in SUITES:
        raise ValueError(f"unknown gradcheck target {target!r}; expected one of {TARGETS}")
    rows = []
    for seed in seeds:
        rows.extend(SUITES[target](seed, eps=eps))
    return rows


def format_rows(rows: list) -> str:
    lines = [f"{'target':<10} {'case':<24} {'seed':>4} {'max_rel_err':>12} {'coords':>7} {'frozen':>7}  result"]
    for r in rows:
        lines.append(f"{r.target:<10} {r.case:<24} {r.seed:>4} {r.error:>12.3e} {r.checked:>7} "
                     f"{r.frozen:>7}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
