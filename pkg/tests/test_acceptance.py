"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict (printed in the terminal summary) and
then asserts it.  Criterion 6 trains six desk-scale models and dominates the
runtime (roughly 15 minutes on one CPU core).
"""

import copy
import csv
import time

import numpy as np
import oracles
import pytest

import gcaresunet.cli as cli
from gcaresunet.attention import (
    GcaConfig,
    GroupedCoordAttention,
    baseline_attention_forward,
    coord_attention,
    gca_forward,
    gca_param_count,
)
from gcaresunet.checkpoint import load_checkpoint, save_checkpoint
from gcaresunet.config import ModelConfig, TrainConfig, desk_run_config, load_run_config
from gcaresunet.metrics import confusion_metrics, dsc, hd95
from gcaresunet.model import (
    REPORTED_BASELINE_PARAMS,
    REPORTED_GCA_PARAMS,
    attention_sites,
    build_model,
    count_macs,
    count_params,
    enumerate_params,
)
from gcaresunet.tensor import Tensor, no_grad
from gcaresunet.train import EarlyStopping, cosine_lr, evaluate, prepare_eval, train
from gcaresunet.verify import TARGETS, run_suite

DESK_SEEDS = (10, 11, 12)


def test_criterion_1_gradient_correctness(verdict):
    start = time.perf_counter()
    rows = [r for t in TARGETS for r in run_suite(t, range(5), eps=1e-3)]
    elapsed = time.perf_counter() - start
    worst = max(rows, key=lambda r: r.error)
    cases = {(r.target, r.case) for r in rows}
    ok = all(r.passed for r in rows) and elapsed < 300 and all(
        len({r.seed for r in rows if (r.target, r.case) == c}) == 5 for c in cases)
    verdict(1, ok, f"{len(rows)} checks over {len(cases)} cases x 5 seeds, worst {worst.error:.2e} "
                   f"({worst.target}/{worst.case}), {elapsed:.0f} s")
    assert ok


def _gca(channels, seed, **kw):
    m = GroupedCoordAttention(channels, GcaConfig(**kw), np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    m.bn.weight.data = (1 + 0.3 * rng.standard_normal(m.bn.weight.shape)).astype(np.float32)
    m.bn.bias.data = (0.3 * rng.standard_normal(m.bn.bias.shape)).astype(np.float32)
    m.eval()
    return m


def test_criterion_2_gca_invariants(verdict):
    rng = np.random.default_rng(0)
    checks = {}
    x = rng.standard_normal((2, 16, 7, 5))
    xf = x.astype(np.float32)
    y = _gca(16, 0)(Tensor(x)).data
    checks["shape"] = y.shape == x.shape
    nz = np.abs(xf) > 1e-3
    ratio = y[nz] / xf[nz]
    checks["gates in (0,1)"] = bool(np.all(ratio > 0) and np.all(ratio < 1))

    zero = GroupedCoordAttention(16, GcaConfig())
    zero.conv1.weight.data[:] = 0
    zero.conv2.weight.data[:] = 0
    checks["zero weights 0.25x"] = all(
        np.max(np.abs(zero.train(mode)(Tensor(x)).data - 0.25 * x)) < 1e-6 for mode in (True, False))

    g1 = GroupedCoordAttention(12, GcaConfig(groups=1, pooling="avg"), np.random.default_rng(5)).eval()
    ref = coord_attention(12, rng=np.random.default_rng(5)).eval()
    x12 = Tensor(rng.standard_normal((2, 12, 6, 7)))
    checks["G=1 bitwise CoordAtt"] = np.array_equal(gca_forward(x12, g1.cfg, g1).data,
                                                    baseline_attention_forward("CoordAtt", x12, ref).data)

    local = True
    for pooling in ("avg", "max", "both"):
        m = _gca(8, 1, pooling=pooling)
        x8 = rng.standard_normal((1, 8, 5, 5))
        base = m(Tensor(x8)).data
        for c in range(8):
            xp = x8.copy()
            xp[0, c] += rng.standard_normal((5, 5))
            out = m(Tensor(xp)).data
            other = slice(4, 8) if c < 4 else slice(0, 4)
            local &= np.array_equal(out[:, other], base[:, other])
    checks["group locality"] = bool(local)

    g, cg = 4, 3
    m = _gca(g * cg, 2, groups=g, reduction=1, min_mid=2)
    q = _gca(g * cg, 2, groups=g, reduction=1, min_mid=2)
    mid, perm = m.cfg.mid(g * cg), [2, 0, 3, 1]
    ch = np.concatenate([np.arange(p * cg, (p + 1) * cg) for p in perm])
    hid = np.concatenate([np.arange(p * mid, (p + 1) * mid) for p in perm])
    q.conv1.weight.data = m.conv1.weight.data[hid]
    q.conv2.weight.data = m.conv2.weight.data[ch]
    for name in ("weight", "bias", "running_mean", "running_var"):
        getattr(q.bn, name).data = getattr(m.bn, name).data[:, hid]
    xe = rng.standard_normal((2, g * cg, 5, 6))
    diff = np.max(np.abs(q(Tensor(xe[:, ch])).data - m(Tensor(xe)).data[:, ch]))
    checks["group permutation equivariance"] = diff < 1e-6

    failed = [k for k, v in checks.items() if not v]
    verdict(2, not failed, f"{len(checks) - len(failed)}/{len(checks)} invariants hold"
                           + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed


def test_criterion_3_parameter_accounting(verdict):
    checks = {}
    for attention in ("none", "SE", "CBAM", "CoordAtt", "GCA"):
        cfg = ModelConfig(attention=attention)
        checks[f"closed form = enumeration ({attention})"] = count_params(cfg) == enumerate_params(build_model(cfg, 0))
    gca_cfg = ModelConfig()
    gca = count_params(gca_cfg)
    base = count_params(ModelConfig(attention="none"))
    checks["overhead = sum of gca_param_count"] = (
        gca["total"] - base["total"] == gca["attention"]
        == sum(gca_param_count(c, gca_cfg.gca) for c in attention_sites(gca_cfg)))
    rel = (base["total"] - REPORTED_BASELINE_PARAMS) / REPORTED_BASELINE_PARAMS
    checks["baseline within 2%"] = abs(rel) < 0.02
    macs = [count_macs(ModelConfig(attention=a), (1, 3, 224, 224)) for a in ("none", "GCA")]
    checks["FLOPs = 2 x MACs"] = all(t["flops"] == 2 * t["total"] for t in macs)
    reported_overhead = REPORTED_GCA_PARAMS - REPORTED_BASELINE_PARAMS
    failed = [k for k, v in checks.items() if not v]
    verdict(3, not failed, f"baseline {base['total'] / 1e6:.2f} M ({rel:+.2%} vs 43.93 M); "
                           f"GCA overhead {gca['attention'] / 1e6:+.2f} M vs reported "
                           f"{reported_overhead / 1e6:+.2f} M (informational, not gated)")
    assert not failed, failed


def test_criterion_4_metric_oracles(verdict):
    start = time.perf_counter()
    pairs = oracles.random_pairs(100, 16, np.random.default_rng(2024))
    set_mismatch, hd_worst, flag_mismatch = 0, 0.0, 0
    for pred, gt, k in pairs:
        conf = confusion_metrics(pred, gt, k)
        pl, gl = pred.tolist(), gt.tolist()
        for c in range(k):
            ref = oracles.confusion(pl, gl, c)
            set_mismatch += dsc(pred, gt, c) != oracles.dsc(pl, gl, c)
            set_mismatch += sum(conf[key][c] != ref[key] for key in ("iou", "acc", "spe", "sen"))
            (d, ok), (rd, rok) = hd95(pred, gt, c), oracles.hd95(pl, gl, c)
            hd_worst = max(hd_worst, abs(d - rd))
            flag_mismatch += ok != rok
    elapsed = time.perf_counter() - start
    ok = set_mismatch == 0 and flag_mismatch == 0 and hd_worst <= 1e-12 and elapsed < 60
    verdict(4, ok, f"100 pairs: {set_mismatch} set-metric mismatches, HD95 max diff {hd_worst:.1e}, "
                   f"{elapsed:.1f} s")
    assert ok


def test_criterion_5_schedule_and_stopping(verdict):
    cfg = TrainConfig()
    lrs = [cosine_lr(e, cfg) for e in range(cfg.epochs + 1)]
    endpoints = lrs[0] == 1e-4 and lrs[-1] == 1e-6
    monotone = all(a >= b for a, b in zip(lrs, lrs[1:]))
    # improvement through epoch 25, then a plateau within min_delta of the best
    losses = [1.0, 0.8, 0.6, 0.5, 0.4] + [0.4 - 0.5e-4, 0.41, 0.4, 0.45, 0.39995, 0.4, 0.3]
    stopper, stop_epoch, evals_after_best = EarlyStopping(cfg.patience, cfg.min_delta), None, 0
    for i, v in enumerate(losses):
        decision = stopper.update(v)
        evals_after_best = stopper.bad
        if decision == "stop":
            stop_epoch = (i + 1) * cfg.eval_every
            break
    plateau = stop_epoch == 25 + 30 and evals_after_best == 6
    ok = endpoints and monotone and plateau
    verdict(5, ok, f"lr(0)={lrs[0]!r}, lr(200)={lrs[-1]!r}, monotone={monotone}, "
                   f"plateau stop at epoch {stop_epoch} after {evals_after_best} non-improving evaluations")
    assert ok


@pytest.fixture(scope="module")
def desk_runs():
    """(attention, seed) -> (best-checkpoint val mDSC, epochs run, seconds)."""
    out = {}
    for attention in ("GCA", "none"):
        for seed in DESK_SEEDS:
            cfg = desk_run_config(seed=seed, attention=attention)
            splits = cli.load_splits(cfg)
            start = time.perf_counter()
            result = train(cfg.model, cfg.train, splits["train"], splits["val"], cfg.augment,
                           image_size=cfg.data.image_size)
            elapsed = time.perf_counter() - start
            best = next(r for r in result.history if r["epoch"] == result.best_epoch)
            out[attention, seed] = (best["val_mdsc"], len(result.history), elapsed)
    return out


def test_criterion_6_desk_training(desk_runs, verdict):
    cfg = desk_run_config()
    splits = cli.load_splits(cfg)
    sizes_ok = (len(splits["train"]), len(splits["val"])) == (200, 50)
    gca10 = desk_runs["GCA", 10][0]
    mean = {a: float(np.mean([desk_runs[a, s][0] for s in DESK_SEEDS])) for a in ("GCA", "none")}
    budget_ok = all(epochs <= 60 and secs <= 1800 for _, epochs, secs in desk_runs.values())
    ok = sizes_ok and budget_ok and gca10 >= 0.90 and mean["GCA"] >= mean["none"] - 0.01
    slowest = max(secs for _, _, secs in desk_runs.values())
    verdict(6, ok, f"GCA seed 10 mDSC {gca10:.4f} (>= 0.90); mean over seeds GCA {mean['GCA']:.4f} "
                   f"vs none {mean['none']:.4f} (floor {mean['none'] - 0.01:.4f}); "
                   f"GCA-minus-none {mean['GCA'] - mean['none']:+.4f} reported, not gated; "
                   f"slowest run {slowest:.0f} s")
    assert ok


def test_criterion_7_ablation_structure(tmp_path, verdict):
    out = tmp_path / "abl"
    code = cli.main(["ablate", "--grid", "groups=1,2,4", "reduction=1,2,4,8", "pooling=avg,max,both",
                     "--budget-epochs", "1", "--n", "20", "--out", str(out)])
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    got = [(r["table"], int(r["groups"]), int(r["reduction"]), r["pooling"]) for r in rows]
    expected = ([("groups", g, 2, "both") for g in (1, 2, 4)]
                + [("reduction", 2, r, "both") for r in (1, 2, 4, 8)]
                + [("pooling", 2, 2, p) for p in ("avg", "max", "both")])
    consistent = True
    for r in rows:
        m = copy.deepcopy(desk_run_config().model)
        m.gca = GcaConfig(groups=int(r["groups"]), reduction=int(r["reduction"]), pooling=r["pooling"])
        counts = count_params(m)
        consistent &= int(r["params"]) == counts["total"]
        consistent &= int(r["attention_params"]) == sum(gca_param_count(c, m.gca) for c in attention_sites(m))
    ok = code == 0 and got == expected and consistent and all(r["status"] == "ok" for r in rows)
    verdict(7, ok, f"{len(rows)} rows (3 groups + 4 reduction + 3 pooling), params consistent: {bool(consistent)}")
    assert ok


@pytest.fixture(scope="module")
def twin_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("twins")
    cfg = desk_run_config()
    cfg.data.synth.count = 30
    cfg.train.epochs = 3
    cfg.train.eval_every = 1
    (root / "cfg.json").write_text(cfg.dumps())
    for run in ("a", "b"):
        assert cli.main(["train", "--config", str(root / "cfg.json"), "--out", str(root / run)]) == 0
    return root


def test_criterion_8_determinism(twin_runs, verdict):
    files = ["history.csv", "best.ckpt/manifest.json", "best.ckpt/weights.bin"]
    same = {f: (twin_runs / "a" / f).read_bytes() == (twin_runs / "b" / f).read_bytes() for f in files}
    ok = all(same.values())
    verdict(8, ok, ", ".join(f"{f} {'identical' if v else 'DIFFERS'}" for f, v in same.items()))
    assert ok


def test_criterion_9_persistence(twin_runs, tmp_path, verdict):
    ckpt = twin_runs / "a" / "best.ckpt"
    model, manifest = load_checkpoint(ckpt)
    save_checkpoint(tmp_path / "again", model, manifest["meta"])
    reloaded, _ = load_checkpoint(tmp_path / "again")
    bitwise = all(a.data.tobytes() == b.data.tobytes()
                  for (_, a), (_, b) in zip(model.named_tensors(), reloaded.named_tensors()))
    bytes_same = all((ckpt / f).read_bytes() == (tmp_path / "again" / f).read_bytes()
                     for f in ("manifest.json", "weights.bin"))
    cfg = load_run_config(twin_runs / "a" / "config.json")
    val = prepare_eval(cli.load_splits(cfg)["val"], manifest["meta"]["image_size"])
    with no_grad():
        val_loss, _ = evaluate(model, val, cfg.model.num_classes, cfg.train.batch_size)
    diff = abs(val_loss - manifest["meta"]["val_loss"])
    ok = bitwise and bytes_same and diff < 1e-6
    verdict(9, ok, f"round trip bitwise {bitwise}, re-saved bytes identical {bytes_same}, "
                   f"val loss reproduced to {diff:.1e}")
    assert ok
