"""Command-line entry point: synth, train, eval, ablate, gradcheck, params."""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import (
    ConfigError,
    RunConfig,
    SynthConfig,
    desk_run_config,
    load_run_config,
)
from .data import (
    crop_back,
    make_split,
    read_dataset,
    resize_with_pad,
    synth_generate,
    to_input,
    write_dataset,
)
from .metrics import evaluate_pair, summarize, write_metrics_csv
from .model import (
    REPORTED_BASELINE_MACS,
    REPORTED_BASELINE_PARAMS,
    REPORTED_GCA_MACS,
    REPORTED_GCA_PARAMS,
    SegModel,
    attention_sites,
    count_macs,
    count_params,
)
from .tensor import Tensor, no_grad
from .train import TrainingDiverged, train
from .verify import TARGETS, format_rows, run_suite

log = logging.getLogger("gcaresunet")

ABLATION_FACTORS = ("groups", "reduction", "pooling", "attention")
ABLATION_COLUMNS = ["table", "attention", "groups", "reduction", "pooling", "params",
                    "attention_params", "mdsc", "mhd95", "seeds", "epochs", "status", "reason"]


# ---------------------------------------------------------------------------
# data loading shared by train / ablate
# ---------------------------------------------------------------------------


def load_splits(cfg: RunConfig) -> dict:
    """Samples per split from ``data.dir`` or, failing that, the synthetic generator."""
    if cfg.data.dir:
        by_id, split = read_dataset(cfg.data.dir)
        return {name: [by_id[i] for i in ids] for name, ids in split.items()}
    samples = synth_generate(cfg.data.synth)
    split = make_split(len(samples), cfg.data.split)
    return {name: [samples[i] for i in ids] for name, ids in split.items()}


def run_training(cfg: RunConfig, out_dir, progress=None):
    splits = load_splits(cfg)
    meta = {"seed": cfg.train.seed}
    return train(cfg.model, cfg.train, splits.get("train", []), splits.get("val", []),
                 cfg.augment, out_dir, meta, progress, cfg.data.image_size)


def predict_masks(model: SegModel, samples: list, size: int, batch_size: int = 8) -> list:
    """Pad-resize, predict in eval mode, and crop back to each sample's size."""
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = [resize_with_pad(s.image, None, size) for s in samples[i : i + batch_size]]
            pred = model(Tensor(to_input([c.image for c in chunk]))).data.argmax(axis=1)
            out.extend(crop_back(p, c.meta) for p, c in zip(pred, chunk))
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(image_size=args.size, num_classes=args.classes, count=args.n, seed=args.seed)
    problems = cfg.problems()
    if problems:
        raise ConfigError(problems)
    samples = synth_generate(cfg)
    split = make_split(len(samples))
    write_dataset(args.out, samples, split)
    print(f"wrote {len(samples)} samples to {args.out} "
          f"(train {len(split['train'])}, val {len(split['val'])}, test {len(split['test'])})")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())

    def progress(row):
        extra = f" val_loss {row['val_loss']:.4f} val_mdsc {row['val_mdsc']:.4f}" if "val_loss" in row else ""
        log.info("epoch %d lr %.3g train_loss %.4f%s", row["epoch"], row["lr"], row["train_loss"], extra)

    result = run_training(cfg, out, progress)
    print(f"best val loss {result.best_val_loss:.6f} at epoch {result.best_epoch}"
          f"{' (stopped early)' if result.stopped_early else ''}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    model, manifest = load_checkpoint(args.checkpoint)
    size = int(manifest["meta"].get("image_size", 64))
    by_id, split = read_dataset(args.data)
    ids = split.get(args.split, [])
    if not ids:
        log.warning("split %r of %s is empty; writing a summary-only metrics file", args.split, args.data)
        write_metrics_csv(args.metrics_out, [])
        return 0
    samples = [by_id[i] for i in ids]
    preds = predict_masks(model, samples, size)
    k = model.cfg.num_classes
    records = [evaluate_pair(p, s.mask, k, sample=str(i)) for p, s, i in zip(preds, samples, ids)]
    summary = write_metrics_csv(args.metrics_out, records)
    m = summary.means
    print(f"{len(records)} samples: mDSC {m['mdsc']:.4f} mHD95 {m['mhd95']:.4f} mIoU {m['miou']:.4f} "
          f"mAcc {m['macc']:.4f} mSpe {m['mspe']:.4f} mSen {m['msen']:.4f}"
          + (f" ({summary.hd95_excluded} HD95 entries excluded)" if summary.hd95_excluded else ""))
    return 0


def parse_grid(tokens: list) -> dict:
    """``["groups=1,2,4", "pooling=avg,max"]`` -> ``{"groups": [1, 2, 4], "pooling": [...]}``."""
    grid = {}
    for tok in tokens:
        key, sep, values = tok.partition("=")
        if not sep or key not in ABLATION_FACTORS:
            raise ValueError(f"bad grid entry {tok!r}; expected factor=v1,v2 with factor in {ABLATION_FACTORS}")
        vals = [v for v in values.split(",") if v]
        if key in ("groups", "reduction"):
            try:
                vals = [int(v) for v in vals]
            except ValueError:
                raise ValueError(f"{key} values must be integers: {values!r}") from None
        grid[key] = vals
    return grid


def ablation_points(grid: dict, design: str) -> list:
    """Grid points as (table, {factor: value}) pairs.

    ``tables`` varies one factor at a time around the base config (the
    one-factor sweep layout of an ablation table); ``full`` is the
    Cartesian product of every listed factor.
    """
    if design == "tables":
        return [(key, {key: v}) for key, values in grid.items() for v in values]
    keys = list(grid)
    return [("full", dict(zip(keys, combo))) for combo in itertools.product(*(grid[k] for k in keys))]


def ablation_config(base: RunConfig, point: dict) -> RunConfig:
    cfg = copy.deepcopy(base)
    gca = cfg.model.gca
    if "attention" in point:
        cfg.model.attention = point["attention"]
    for key in ("groups", "reduction", "pooling"):
        if key in point:
            setattr(gca, key, point[key])
            if "attention" not in point:
                cfg.model.attention = "GCA"
    return cfg


def _ablation_problem(cfg: RunConfig) -> str:
    problems = cfg.model.problems()
    if not problems and cfg.model.attention in ("GCA", "CoordAtt"):
        for c in attention_sites(cfg.model):
            if c % cfg.model.gca.groups:
                problems.append(f"C={c} is not divisible by G={cfg.model.gca.groups}")
                break
    return "; ".join(problems)


def run_ablation(base: RunConfig, grid: dict, design: str, seeds: list, out_dir,
                 progress=None) -> list:
    rows, cache = [], {}
    splits = load_splits(base)
    for table, point in ablation_points(grid, design):
        cfg = ablation_config(base, point)
        m = cfg.model
        uses_gca = m.attention in ("GCA", "CoordAtt")
        row = {"table": table, "attention": m.attention,
               "groups": m.gca.groups if m.attention == "GCA" else (1 if uses_gca else ""),
               "reduction": m.gca.reduction if uses_gca else "",
               "pooling": (m.gca.pooling if m.attention == "GCA" else "avg") if uses_gca else "",
               "seeds": " ".join(map(str, seeds)), "epochs": cfg.train.epochs,
               "params": "", "attention_params": "", "mdsc": "", "mhd95": "", "reason": ""}
        problem = _ablation_problem(cfg)
        if problem:
            row.update(status="skipped", reason=problem)
            rows.append(row)
            continue
        counts = count_params(m)
        row.update(params=counts["total"], attention_params=counts["attention"])
        key = m.attention, tuple(sorted(vars(m.gca).items())) if uses_gca else None
        if key not in cache:
            scores, hds, status = [], [], "ok"
            for seed in seeds:
                run = copy.deepcopy(cfg)
                run.train.seed = seed
                try:
                    result = train(run.model, run.train, splits["train"], splits["val"], run.augment,
                                   None, None, None, run.data.image_size)
                except TrainingDiverged as e:
                    status = f"diverged: {e}"
                    break
                preds = predict_masks(result.model, splits["val"], run.data.image_size)
                records = [evaluate_pair(p, s.mask, m.num_classes) for p, s in zip(preds, splits["val"])]
                summary = summarize(records)
                scores.append(summary.means["mdsc"])
                hds.append(summary.means["mhd95"])
            cache[key] = (status, float(np.mean(scores)) if scores else math.nan,
                          float(np.nanmean(hds)) if hds and not all(map(math.isnan, hds)) else math.nan)
        status, mdsc, mhd = cache[key]
        row.update(status="ok" if status == "ok" else "failed",
                   reason="" if status == "ok" else status, mdsc=mdsc, mhd95=mhd)
        rows.append(row)
        if progress:
            progress(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, ABLATION_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return rows


def cmd_ablate(args) -> int:
    base = load_run_config(args.config) if args.config else desk_run_config()
    if args.n is not None:
        base.data.synth.count = args.n
    base.train.epochs = args.budget_epochs
    grid = parse_grid(args.grid)
    seeds = [int(s) for s in args.seeds.split(",")]

    def progress(row):
        log.info("%s %s G=%s r=%s %s: params %s mDSC %.4f", row["table"], row["attention"], row["groups"],
                 row["reduction"], row["pooling"], row["params"], row["mdsc"])

    rows = run_ablation(base, grid, args.design, seeds, args.out, progress)
    skipped = sum(r["status"] == "skipped" for r in rows)
    print(f"wrote {len(rows)} rows to {Path(args.out) / 'ablation.csv'} ({skipped} skipped)")
    return 0


def cmd_gradcheck(args) -> int:
    targets = TARGETS if args.target == "all" else (args.target,)
    rows = []
    for t in targets:
        rows.extend(run_suite(t, range(args.seeds), eps=args.eps))
    print(format_rows(rows))
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks below {rows[0].tol:g}" if rows else "no checks")
    return 1 if failed else 0


def _fmt_table(title: str, table: dict, unit: float, suffix: str) -> list:
    lines = [title]
    for k, v in table.items():
        lines.append(f"  {k:<10} {v:>16,d}  ({v / unit:8.3f} {suffix})")
    return lines


def params_report(model_cfg, input_size: int = 224) -> str:
    with_attn = count_params(model_cfg)
    base_cfg = copy.deepcopy(model_cfg)
    base_cfg.attention = "none"
    base = count_params(base_cfg)
    shape = (1, model_cfg.in_channels, input_size, input_size)
    macs = count_macs(model_cfg, shape)
    base_macs = count_macs(base_cfg, shape)
    lines = _fmt_table(f"parameters ({model_cfg.attention}, width {model_cfg.width_scale})",
                       with_attn, 1e6, "M")
    lines += _fmt_table(f"MACs at {input_size}x{input_size}", macs, 1e9, "G")

    def delta(ours, ref):
        return f"{ours / 1e6:.2f} M vs reported {ref / 1e6:.2f} M ({(ours - ref) / ref:+.2%})"

    lines.append(f"baseline (attention=none) params: {delta(base['total'], REPORTED_BASELINE_PARAMS)}")
    if model_cfg.attention != "none":
        lines.append(f"{model_cfg.attention} params: {delta(with_attn['total'], REPORTED_GCA_PARAMS)}")
        lines.append(f"{model_cfg.attention} overhead: {with_attn['attention'] / 1e6:+.2f} M vs reported "
                     f"{(REPORTED_GCA_PARAMS - REPORTED_BASELINE_PARAMS) / 1e6:+.2f} M")
    lines.append(f"baseline MACs: {base_macs['total'] / 1e9:.2f} G vs reported {REPORTED_BASELINE_MACS / 1e9:.2f} G "
                 f"({(base_macs['total'] - REPORTED_BASELINE_MACS) / REPORTED_BASELINE_MACS:+.2%}); "
                 f"FLOPs {base_macs['flops'] / 1e9:.2f} G")
    if model_cfg.attention != "none":
        lines.append(f"{model_cfg.attention} MACs: {macs['total'] / 1e9:.2f} G vs reported "
                     f"{REPORTED_GCA_MACS / 1e9:.2f} G; FLOPs {macs['flops'] / 1e9:.2f} G")
    return "\n".join(lines)


def cmd_params(args) -> int:
    model_cfg = load_run_config(args.config).model
    print(params_report(model_cfg, args.input_size))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcaresunet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic segmentation dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model from a JSON run config")
    s.add_argument("--config", help="run config JSON (defaults for every missing field)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--metrics-out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train every point of an attention ablation grid")
    s.add_argument("--grid", nargs="+", default=["groups=1,2,4", "reduction=1,2,4,8", "pooling=avg,max,both"],
                   help="factor=v1,v2 ... for factors " + ", ".join(ABLATION_FACTORS))
    s.add_argument("--design", choices=("tables", "full"), default="tables")
    s.add_argument("--budget-epochs", type=int, default=15)
    s.add_argument("--seeds", default="10")
    s.add_argument("--config", help="base run config (default: the desk-scale protocol)")
    s.add_argument("--n", type=int, help="override the synthetic sample count")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    s.add_argument("--target", choices=(*TARGETS, "all"), default="ops")
    s.add_argument("--eps", type=float, default=1e-3)
    s.add_argument("--seeds", type=int, default=5)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("params", help="parameter and MAC tables")
    s.add_argument("--config")
    s.add_argument("--input-size", type=int, default=224)
    s.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
