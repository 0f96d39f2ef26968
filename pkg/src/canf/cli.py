"""Command-line entry points: train / sample / ablate / bench / verify."""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .bench import bench_table, run_bench
from .checkpoint import load_into_model, save_checkpoint
from .config import Config, parse_config
from .data import gen_dataset
from .diffusion import GuidanceSpec, ddim_sample, make_schedule
from .harness import (
    reports_table,
    run_ablation,
    run_train,
    write_reports_csv,
    write_reports_jsonl,
)
from .model import build_model
from .pgm import write_pgm
from .verify import run_all


def _add_common(p):
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")


def _load_config(args) -> Config:
    return parse_config(args.config, args.overrides)


def _ensure_out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _ensure_out(args)
    dataset = gen_dataset(cfg.run.data_seed, cfg.model.n_classes, cfg.run.n_per_class,
                          cfg.model.image_size)
    report = run_train(cfg, dataset, args.seed)
    for row in report.epochs:
        print(f"epoch {row.epoch:3d}  train {row.train_loss:.6f}  eval {row.eval_loss:.6f}  "
              f"{row.step_ms:.1f} ms/step")
    print(f"fidelity {report.fidelity:.4f}  params {report.param_counts}")
    save_checkpoint(os.path.join(out, "model.canf"), report.model, report.config_text)
    write_reports_csv([report], os.path.join(out, "report.csv"))
    write_reports_jsonl([report], os.path.join(out, "report.jsonl"))
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.config_text)
    print(f"wrote {out}/model.canf, report.csv, report.jsonl")
    return 0


def cmd_sample(args) -> int:
    out = _ensure_out(args)
    ckpt = args.ckpt or os.path.join(out, "model.canf")
    cfg = parse_config(overrides=args.overrides)
    from .checkpoint import read_checkpoint

    config_text, _ = read_checkpoint(ckpt)
    cfg = parse_config(text=config_text, overrides=args.overrides)
    model = build_model(cfg.model, seed=0, max_timestep=cfg.run.timesteps)
    load_into_model(ckpt, model)
    schedule = make_schedule(cfg.run.timesteps, cfg.run.beta_start, cfg.run.beta_end)

    n = args.n
    if args.class_label is not None:
        labels = np.full(n, args.class_label, dtype=np.int64)
    else:
        labels = np.arange(n, dtype=np.int64) % cfg.model.n_classes
    if labels.max() >= cfg.model.n_classes:
        raise ValueError(f"--class must be < n_classes={cfg.model.n_classes}")
    guide = GuidanceSpec(args.guidance, cfg.model.n_classes)
    rng = np.random.default_rng(args.seed)
    x = ddim_sample(model, labels, schedule, args.steps, guide, rng, cfg.model.image_size)
    np.save(os.path.join(out, "samples.npy"), x)
    for i in range(n):
        write_pgm(os.path.join(out, f"sample_{i:03d}_class{labels[i]}.pgm"), x[i])
    print(f"wrote {n} samples to {out}/ (samples.npy + PGM files)")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _ensure_out(args)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    reports = run_ablation(args.suite, cfg, seeds)
    print(reports_table(reports))
    write_reports_csv(reports, os.path.join(out, f"ablation_{args.suite}.csv"))
    write_reports_jsonl(reports, os.path.join(out, f"ablation_{args.suite}.jsonl"))
    print(f"wrote {out}/ablation_{args.suite}.csv and .jsonl")
    failed = [r for r in reports if getattr(r, "error", None)]
    return 1 if failed else 0


def cmd_bench(args) -> int:
    out = _ensure_out(args)
    batches = tuple(int(b) for b in args.batch.split(","))
    rows = run_bench(batch_sizes=batches, repeats=args.repeats, seed=args.seed)
    print(bench_table(rows))
    with open(os.path.join(out, "bench.csv"), "w", encoding="utf-8") as fh:
        fh.write("shape,batch,loop_ms,fused_ms,static_ms,speedup,overhead_pct,max_abs_diff\n")
        for r in rows:
            fh.write(f"{r.shape.label},{r.batch},{r.loop_ms:.4f},{r.fused_ms:.4f},"
                     f"{r.static_ms:.4f},{r.speedup:.3f},{r.overhead_pct:.2f},{r.max_abs_diff:.3e}\n")
    print(f"wrote {out}/bench.csv")
    return 0


def cmd_verify(args) -> int:
    results = run_all(fast=args.fast)
    ok = True
    for res in results:
        print(res.line())
        ok = ok and res.ok
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="canf",
        description="Condition-aware layer engine and toy diffusion harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write a checkpoint + reports")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate images from a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", default=None, help="checkpoint path (default: OUT/model.canf)")
    p.add_argument("--steps", type=int, default=20, help="sampling steps")
    p.add_argument("--class", dest="class_label", type=int, default=None,
                   help="class label (default: cycle through classes)")
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("-n", type=int, default=4, help="number of samples")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("ablate", help="run an ablation suite")
    _add_common(p)
    p.add_argument("--suite", required=True,
                   choices=["module-sets", "condition-sources", "control-methods", "can-vs-aks"])
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("bench", help="time per-sample loop vs fused grouped execution")
    _add_common(p)
    p.add_argument("--batch", default="1,8,32", help="comma-separated batch sizes")
    p.add_argument("--repeats", type=int, default=7)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("verify", help="run the fusion/gradient property suites")
    p.add_argument("--fast", action="store_true", help="reduced instance counts")
    p.set_defaults(fn=cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # one-line machine-parsable failure record
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
