"""U-Net decoder, full segmentation model, and complexity accounting."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .attention import GcaConfig, gca_param_count
from .backbone import EXPANSION, Encoder
from .config import ModelConfig
from .nn import Conv2d, Module, bilinear_upsample_x2, conv_out_size, mac_profile, relu
from .tensor import Tensor, concat, no_grad

COMPONENTS = ("stem", "stage1", "stage2", "stage3", "stage4", "attention", "decoder", "head")

REPORTED_BASELINE_PARAMS = 43.93e6
REPORTED_GCA_PARAMS = 44.98e6
REPORTED_BASELINE_MACS = 17.57e9
REPORTED_GCA_MACS = 17.80e9


class DecoderStage(Module):
    def __init__(self, c_low: int, c_skip: int, c_out: int, rng):
        self.conv1 = Conv2d(c_low + c_skip, c_out, 3, padding=1, bias=True, rng=rng)
        self.conv2 = Conv2d(c_out, c_out, 3, padding=1, bias=True, rng=rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        u = bilinear_upsample_x2(x)
        if u.shape[0] != skip.shape[0] or u.shape[2:] != skip.shape[2:]:
            raise ValueError(f"upsampled {u.shape} does not align with skip {skip.shape}")
        h = relu(self.conv1(concat([u, skip], "C")))
        return relu(self.conv2(h))


def decoder_stage(x: Tensor, skip: Tensor, params: DecoderStage) -> Tensor:
    return params(x, skip)


class SegModel(Module):
    """Encoder, four skip-fusing decoder stages, a final x2 stage, and a 1x1 head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.Generator(np.random.Philox(0))
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        skips = self.encoder.out_channels
        widths = [cfg.width(c) for c in cfg.decoder_channels]
        self.decoder = []
        c_low = skips[4]
        for i, c_out in enumerate(widths):
            self.decoder.append(DecoderStage(c_low, skips[3 - i], c_out, rng))
            c_low = c_out
        self.final = Conv2d(c_low, cfg.width(cfg.final_channels), 3, padding=1, bias=True, rng=rng)
        self.head = Conv2d(cfg.width(cfg.final_channels), cfg.num_classes, 1, bias=True, rng=rng)

    def forward(self, image: Tensor) -> Tensor:
        feats = self.encoder(image)
        x = feats[4]
        for i, stage in enumerate(self.decoder):
            x = stage(x, feats[3 - i])
        x = relu(self.final(bilinear_upsample_x2(x)))
        return self.head(x)

    def predict(self, image: Tensor) -> np.ndarray:
        """Eval-mode argmax masks of shape (B, H, W)."""
        was = self.training
        self.eval()
        with no_grad():
            logits = self(image)
        self.train(was)
        return logits.data.argmax(axis=1)


def model_forward(image: Tensor, model: SegModel) -> Tensor:
    return model(image)


def build_model(cfg: ModelConfig, seed: int = 0) -> SegModel:
    problems = cfg.problems()
    if problems:
        raise ValueError("; ".join(problems))
    return SegModel(cfg, np.random.Generator(np.random.Philox(seed)))


# ---------------------------------------------------------------------------
# complexity accounting
# ---------------------------------------------------------------------------


def component_of(name: str) -> str:
    parts = name.split(".")
    if ".attn." in f".{name}.":
        return "attention"
    if parts[0] == "encoder":
        if parts[1] == "stem":
            return "stem"
        return f"stage{int(parts[2]) + 1}"
    if parts[0] in ("decoder", "final"):
        return "decoder"
    if parts[0] == "head":
        return "head"
    raise KeyError(f"cannot place parameter {name!r} in a component")


def _table(values: dict) -> OrderedDict:
    out = OrderedDict((c, int(values.get(c, 0))) for c in COMPONENTS)
    out["total"] = sum(out.values())
    return out


def _conv_params(c_in, c_out, k, bias=False, groups=1):
    return c_out * (c_in // groups) * k * k + (c_out if bias else 0)


def attention_param_count(kind: str, channels: int, cfg: ModelConfig) -> int:
    g = cfg.gca
    if kind == "none":
        return 0
    if kind == "GCA":
        return gca_param_count(channels, g)
    if kind == "CoordAtt":
        return gca_param_count(channels, GcaConfig(1, g.reduction, "avg", g.min_mid))
    mid = max(channels // cfg.baseline_reduction, g.min_mid)
    if kind == "SE":
        return 2 * channels * mid + mid + channels
    if kind == "CBAM":
        return 2 * channels * mid + 2 * 7 * 7
    raise ValueError(f"unknown attention kind {kind!r}")


def _blocks(cfg: ModelConfig):
    """Yield (stage index, c_in, mid, stride, attention) for every bottleneck."""
    c_in = cfg.width(cfg.stem_channels)
    for s, (depth, mid, stride, attn) in enumerate(zip(cfg.stage_depths, cfg.stage_mids,
                                                       cfg.stage_strides, cfg.attention_stages)):
        mid = cfg.width(mid)
        for i in range(depth):
            yield s, c_in, mid, stride if i == 0 else 1, attn
            c_in = EXPANSION * mid


def attention_sites(cfg: ModelConfig) -> list:
    """Channel count at every attention insertion point."""
    if cfg.attention == "none":
        return []
    return [EXPANSION * mid for _, _, mid, _, attn in _blocks(cfg) if attn]


def count_params(cfg: ModelConfig) -> OrderedDict:
    """Closed-form element counts per component (BN running stats included)."""
    counts = dict.fromkeys(COMPONENTS, 0)
    stem = cfg.width(cfg.stem_channels)
    counts["stem"] = _conv_params(cfg.in_channels, stem, 7) + 4 * stem
    for s, c_in, mid, stride, attn in _blocks(cfg):
        c_out = EXPANSION * mid
        n = (_conv_params(c_in, mid, 1) + 4 * mid + _conv_params(mid, mid, 3) + 4 * mid
             + _conv_params(mid, c_out, 1) + 4 * c_out)
        if stride != 1 or c_in != c_out:
            n += _conv_params(c_in, c_out, 1) + 4 * c_out
        counts[f"stage{s + 1}"] += n
        if attn:
            counts["attention"] += attention_param_count(cfg.attention, c_out, cfg)
    skips = [stem] + [EXPANSION * cfg.width(m) for m in cfg.stage_mids]
    c_low = skips[4]
    for i, c in enumerate(cfg.decoder_channels):
        c_out = cfg.width(c)
        counts["decoder"] += (_conv_params(c_low + skips[3 - i], c_out, 3, bias=True)
                              + _conv_params(c_out, c_out, 3, bias=True))
        c_low = c_out
    final = cfg.width(cfg.final_channels)
    counts["decoder"] += _conv_params(c_low, final, 3, bias=True)
    counts["head"] = _conv_params(final, cfg.num_classes, 1, bias=True)
    return _table(counts)


def enumerate_params(model: Module) -> OrderedDict:
    """Per-component element counts by walking every stored tensor."""
    counts = dict.fromkeys(COMPONENTS, 0)
    for name, t in model.named_tensors():
        counts[component_of(name)] += t.size
    return _table(counts)


def _attention_macs(kind, c, h, w, b, cfg: ModelConfig) -> int:
    g = cfg.gca
    if kind == "none":
        return 0
    if kind in ("GCA", "CoordAtt"):
        gc = g if kind == "GCA" else GcaConfig(1, g.reduction, "avg", g.min_mid)
        groups, mid = gc.groups, gc.mid(c)
        cg = c // groups
        return b * (h + w) * (groups * mid * cg + c * mid)
    mid = max(c // cfg.baseline_reduction, g.min_mid)
    if kind == "SE":
        return b * 2 * c * mid
    return b * (4 * c * mid + h * w * 2 * 49)


def count_macs(cfg: ModelConfig, input_shape) -> OrderedDict:
    """Analytic multiply-accumulate counts per component.

    Only convolutions count: out elements x (C_in / groups) x kH x kW.
    Normalization, activations, pooling and interpolation are free.  The
    table carries ``flops = 2 * total``.
    """
    b, _, h, w = input_shape
    if h % 32 or w % 32:
        raise ValueError(f"input spatial size {h}x{w} must be divisible by 32")
    macs = dict.fromkeys(COMPONENTS, 0)
    stem = cfg.width(cfg.stem_channels)
    h, w = conv_out_size(h, 7, 2, 3), conv_out_size(w, 7, 2, 3)
    macs["stem"] = b * stem * h * w * cfg.in_channels * 49
    sizes = [(h, w)]
    h, w = conv_out_size(h, 3, 2, 1), conv_out_size(w, 3, 2, 1)
    for s, c_in, mid, stride, attn in _blocks(cfg):
        c_out = EXPANSION * mid
        ho, wo = conv_out_size(h, 3, stride, 1), conv_out_size(w, 3, stride, 1)
        n = b * mid * h * w * c_in + b * mid * ho * wo * mid * 9 + b * c_out * ho * wo * mid
        if stride != 1 or c_in != c_out:
            n += b * c_out * ho * wo * c_in
        macs[f"stage{s + 1}"] += n
        if attn:
            macs["attention"] += _attention_macs(cfg.attention, c_out, ho, wo, b, cfg)
        h, w = ho, wo
        if len(sizes) <= s + 1:
            sizes.append((h, w))
        else:
            sizes[s + 1] = (h, w)
    skips = [stem] + [EXPANSION * cfg.width(m) for m in cfg.stage_mids]
    c_low = skips[4]
    for i, c in enumerate(cfg.decoder_channels):
        c_out = cfg.width(c)
        hs, ws = sizes[3 - i]
        macs["decoder"] += b * c_out * hs * ws * ((c_low + skips[3 - i]) * 9 + c_out * 9)
        c_low = c_out
    hs, ws = sizes[0][0] * 2, sizes[0][1] * 2
    final = cfg.width(cfg.final_channels)
    macs["decoder"] += b * final * hs * ws * c_low * 9
    macs["head"] = b * cfg.num_classes * hs * ws * final
    table = _table(macs)
    table["flops"] = 2 * table["total"]
    return table


def profile_macs(model: SegModel, image: Tensor) -> OrderedDict:
    """MACs per component measured by running the model once."""
    names = {id(m): n for n, m in model.named_modules()}
    was = model.training
    model.eval()
    with no_grad(), mac_profile() as calls:
        model(image)
    model.train(was)
    macs = dict.fromkeys(COMPONENTS, 0)
    for conv, n in calls:
        macs[component_of(names[id(conv)] + ".weight")] += n
    table = _table(macs)
    table["flops"] = 2 * table["total"]
    return table
