"""Command-line entry points.

Exit codes: 0 success, 2 bad configuration or arguments, 3 data or file
format error, 4 numeric abort during training, 5 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from . import checkpoint as ckpt
from . import data, infotheory, train
from .config import RunConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_VERIFY = 5


def _load_config(path: str) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_json(fh.read())


def _cmd_pretrain(args) -> int:
    try:
        cfg = _load_config(args.config)
    except (OSError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = train.pretrain(cfg, resume_from=args.resume)
    except data.DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ckpt.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except train.NumericAbort as exc:
        print(f"numeric abort: {exc}; last good checkpoint retained", file=sys.stderr)
        return EXIT_NUMERIC
    last = result.metrics[-1] if result.metrics else {}
    print(json.dumps({"checkpoint": result.checkpoint_path,
                      "steps": len(result.metrics), "last": last}))
    return EXIT_OK


def _cmd_probe(args) -> int:
    cfg_path = args.config or os.path.join(os.path.dirname(args.ckpt), "config.json")
    try:
        cfg = _load_config(cfg_path)
    except (OSError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        _, _, sections = ckpt.load_checkpoint(args.ckpt, expect_hash=cfg.config_hash(),
                                              force=args.force)
    except (OSError, ckpt.CheckpointError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        report = train.evaluate_probe(cfg, sections, args.dataset, n=args.n)
    except (data.DataFormatError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _worker_cap(requested: int) -> int:
    cap = os.environ.get("SJ_THREADS")
    if cap is not None:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            pass
    return max(1, requested)


def _cmd_verify_info(args) -> int:
    workers = _worker_cap(args.workers)
    grouping = infotheory.verify_grouping_inequality(args.trials, seed=args.seed,
                                                     workers=workers)
    latent = infotheory.verify_latent_claims(args.trials, seed=args.seed,
                                             workers=workers)
    report = {"grouping_inequality": grouping, "latent_claims": latent}
    print(json.dumps(report, sort_keys=True, default=str))
    if not grouping["passed"] or not latent["passed"]:
        return EXIT_VERIFY
    return EXIT_OK


def _cmd_inspect(args) -> int:
    try:
        cfg_hash, step, sections = ckpt.load_checkpoint(args.ckpt)
    except (OSError, ckpt.CheckpointError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_DATA
    info = {
        "config_hash": cfg_hash.hex(),
        "step": step,
        "sections": {name: {k: list(v.shape) for k, v in arrays.items()}
                     for name, arrays in sections.items()},
    }
    head = sections.get("group-head", {})
    groups = sorted(int(k[1:]) for k in head if k.startswith("w"))
    if groups:
        import numpy as np
        norms = np.stack([np.linalg.norm(head[f"w{g}"], axis=0) for g in groups])
        info["group_head"] = {
            "column_norms_max": float(norms.max()),
            "zero_columns": int((norms == 0.0).sum()),
            "active_latents_per_group": {
                str(g): int((norms[i] > 0.0).sum()) for i, g in enumerate(groups)},
        }
    if args.json:
        print(json.dumps(info, sort_keys=True))
    else:
        print(f"step {info['step']}  config {info['config_hash'][:12]}")
        for name, arrays in sorted(info["sections"].items()):
            print(f"  [{name}]")
            for k, shape in sorted(arrays.items()):
                print(f"    {k}: {tuple(shape)}")
        if "group_head" in info:
            gh = info["group_head"]
            print(f"  group head: {gh['zero_columns']} zero columns, "
                  f"max column norm {gh['column_norms_max']:.4g}")
    return EXIT_OK


def _read_jsonl(path: str) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _cmd_export_metrics(args) -> int:
    metrics_path = os.path.join(args.run, "metrics.jsonl")
    timings_path = os.path.join(args.run, "timings.jsonl")
    try:
        rows = _read_jsonl(metrics_path)
        timings = {r["step"]: r["wall_time"] for r in _read_jsonl(timings_path)} \
            if os.path.exists(timings_path) else {}
    except (OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    for row in rows:
        row["wall_time"] = timings.get(row["step"])
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        if args.format == "csv":
            fields = ["step", "jepa_loss", "group_recon", "kl", "penalty",
                      "total", "zero_columns", "wall_time"]
            writer = csv.DictWriter(out, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
        else:
            for row in rows:
                out.write(json.dumps(row, sort_keys=True) + "\n")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsejepa")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("probe", help="linear-probe a frozen checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True,
                   choices=["synth-class", "synth-count"])
    p.add_argument("--config", default=None,
                   help="config JSON (defaults to config.json next to the checkpoint)")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--force", action="store_true",
                   help="load even if the config hash does not match")
    p.set_defaults(fn=_cmd_probe)

    p = sub.add_parser("verify-info", help="run the information-theoretic checks")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.set_defaults(fn=_cmd_verify_info)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=_cmd_inspect)

    p = sub.add_parser("export-metrics", help="export run metrics with timings")
    p.add_argument("--run", required=True, help="run output directory")
    p.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    p.add_argument("--out", default=None, help="output file (default stdout)")
    p.set_defaults(fn=_cmd_export_metrics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
