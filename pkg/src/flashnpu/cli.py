"""Command-line front end: single runs, ablations, scalability sweeps."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import engine as eng
from . import hostmodel as hm
from .hwconfig import ConfigError, SystemConfig, load_config, preset
from .tiler import TilerError, TileShape, optimal_tile_shape
from .topology import TopologyError
from .workload import (ALL_PRESETS, ModelSpec, WorkloadError, load_model,
                       model_preset)

OUTPUT_DIR_ENV = "FLASHNPU_OUTPUT_DIR"


def _resolve_config(args) -> SystemConfig:
    if args.config:
        return load_config(Path(args.config).read_text())
    return preset(args.preset)


def _resolve_model(name: str) -> ModelSpec:
    if os.path.exists(name):
        return load_model(Path(name).read_text())
    return model_preset(name)


def _resolve_out(path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_absolute():
        base = os.environ.get(OUTPUT_DIR_ENV)
        if base:
            p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _emit(record: dict, out: Path | None) -> None:
    text = json.dumps(record, sort_keys=True) + "\n"
    if out:
        out.write_text(text)
    sys.stdout.write(text)


def _config_header(cfg: SystemConfig) -> dict:
    return {sec: dataclasses.asdict(getattr(cfg, sec))
            for sec in ("flash", "timing", "host", "quant", "energy")}


def _parse_tile(text: str) -> TileShape:
    try:
        h, w = text.lower().split("x")
        return TileShape(int(h), int(w))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad tile spec {text!r}; expected HxW") from exc


def _token_kwargs(args, cfg):
    return dict(
        mode=args.mode,
        strategy=args.strategy,
        shape=_parse_tile(args.tile) if args.tile else None,
        alpha_mode=args.alpha,
        slice_bytes=args.slice_bytes,
    )


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    model = _resolve_model(args.model)
    rep = hm.token_latency(cfg, model, args.seq_len, **_token_kwargs(args, cfg))
    record = {"config": _config_header(cfg), "seed": args.seed,
              "report": rep.to_record()}
    if args.plan or args.layout:
        from .tiler import dump_plan, partition_matrix
        shape = _parse_tile(args.tile) if args.tile else optimal_tile_shape(cfg)
        plans = [(m.name, partition_matrix(m.rows, m.cols, cfg, shape=shape))
                 for m in model.all_matrices()]
        if args.plan:
            text = "".join(f"# {name}\n{dump_plan(plan)}" for name, plan in plans)
            _resolve_out(args.plan).write_text(text)
        if args.layout:
            from .topology import build_device, dump_layout, layout_weights
            layout = layout_weights(plans, build_device(cfg))
            _resolve_out(args.layout).write_text(dump_layout(layout))
    if args.trace:
        shape = _parse_tile(args.tile) if args.tile else optimal_tile_shape(cfg)
        from .topology import build_device
        device = build_device(cfg)
        reqs = eng.make_rc_stream(cfg, shape, args.trace_rounds)
        reqs += eng.make_read_stream(cfg, args.trace_rounds * cfg.flash.channel_num,
                                     start_index=1_000_000)
        timeline = eng.schedule(reqs, device, strategy=args.strategy
                                if args.strategy != "a" else "c",
                                slice_bytes=args.slice_bytes)
        _resolve_out(args.trace).write_text(timeline.to_trace())
    _emit(record, _resolve_out(args.out))
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    model = _resolve_model(args.model)
    points = [int(p) for p in args.range.split(",")]
    if not points:
        raise ConfigError("empty sweep range")
    rows = []
    errors = []
    for point in points:
        flash = dataclasses.replace(
            cfg.flash, **{"channel_num" if args.axis == "channels"
                          else "chips_per_channel": point})
        pcfg = dataclasses.replace(cfg, flash=flash)
        try:
            rep = hm.token_latency(pcfg, model, args.seq_len, mode=args.mode,
                                   strategy=args.strategy,
                                   slice_bytes=args.slice_bytes)
            rows.append((point, rep.tokens_per_s, rep.utilization))
        except Exception as exc:  # a bad point must not abort the sweep
            errors.append({"point": point, "error": str(exc)})
    record = {"config": _config_header(cfg), "axis": args.axis,
              "model": model.name, "seed": args.seed,
              "rows": [{"point": p, "tokens_per_s": t, "utilization": u}
                       for p, t, u in rows],
              "errors": errors}
    _emit(record, _resolve_out(args.out))
    if args.csv:
        lines = ["point,tokens_per_s,utilization"]
        lines += [f"{p},{t:.6f},{u:.6f}" for p, t, u in rows]
        _resolve_out(args.csv).write_text("\n".join(lines) + "\n")
    return 0


def _ablate(args, variants) -> int:
    cfg = _resolve_config(args)
    model = _resolve_model(args.model)
    results = {}
    for label, kwargs in variants:
        rep = hm.token_latency(cfg, model, args.seq_len, mode=args.mode,
                               slice_bytes=args.slice_bytes, **kwargs)
        results[label] = rep.to_record()
    labels = [label for label, _ in variants]
    speedup = (results[labels[0]]["tokens_per_s"]
               / results[labels[1]]["tokens_per_s"])
    record = {"config": _config_header(cfg), "model": model.name,
              "seed": args.seed, "results": results, "speedup": speedup}
    _emit(record, _resolve_out(args.out))
    return 0


def cmd_ablate_slicing(args) -> int:
    return _ablate(args, [("sliced", {"strategy": "c"}),
                          ("unsliced", {"strategy": "b"})])


def cmd_ablate_tiling(args) -> int:
    return _ablate(args, [("tiled", {"strategy": "c"}),
                          ("flash_only", {"strategy": "c",
                                          "fraction_override": 1.0})])


def cmd_ablate_tile_size(args) -> int:
    cfg = _resolve_config(args)
    model = _resolve_model(args.model)
    best = optimal_tile_shape(cfg)
    shapes = [best] + [_parse_tile(t) for t in args.tiles.split(",")]
    results = {}
    for shape in shapes:
        rep = hm.token_latency(cfg, model, args.seq_len, mode=args.mode,
                               strategy=args.strategy, shape=shape,
                               slice_bytes=args.slice_bytes)
        results[f"{shape.h_req}x{shape.w_req}"] = rep.to_record()
    record = {"config": _config_header(cfg), "model": model.name,
              "seed": args.seed, "results": results}
    _emit(record, _resolve_out(args.out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flashnpu",
        description="Hybrid NPU + in-flash-computing decode simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model_default=None):
        src = p.add_mutually_exclusive_group()
        src.add_argument("--preset", default="S", choices=["S", "M", "L"],
                         help="hardware preset")
        src.add_argument("--config", help="path to a configuration document")
        p.add_argument("--model", default=model_default or "opt-6.7b",
                       help=f"model preset ({', '.join(ALL_PRESETS)}) or file")
        p.add_argument("--seq-len", type=int, default=512)
        p.add_argument("--mode", default="analytic",
                       choices=["analytic", "simulate"])
        p.add_argument("--strategy", default="c", choices=["a", "b", "c"])
        p.add_argument("--slice-bytes", type=int, default=eng.DEFAULT_SLICE_BYTES)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="write the JSON record here")

    p = sub.add_parser("run", help="single evaluation")
    common(p)
    p.add_argument("--tile", help="override tile shape, HxW")
    p.add_argument("--alpha", default="formula", choices=["formula", "autotune"])
    p.add_argument("--trace", help="write an event trace of a tile window")
    p.add_argument("--trace-rounds", type=int, default=8)
    p.add_argument("--plan", help="write the per-matrix tiling plans here")
    p.add_argument("--layout", help="write the weight-to-page layout table here")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="scale channels or chips")
    common(p)
    p.add_argument("--axis", required=True, choices=["channels", "chips"])
    p.add_argument("--range", required=True,
                   help="comma-separated point list, e.g. 1,2,4,8")
    p.add_argument("--csv", help="also write point,tokens_per_s,utilization CSV")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablate-slicing", help="strategy c vs b")
    common(p)
    p.set_defaults(fn=cmd_ablate_slicing)

    p = sub.add_parser("ablate-tiling", help="hybrid split vs flash-only")
    common(p)
    p.set_defaults(fn=cmd_ablate_tiling)

    p = sub.add_parser("ablate-tile-size", help="optimal tile vs alternatives")
    common(p)
    p.add_argument("--tiles", default="128x4096,4096x128",
                   help="comma-separated HxW list to compare against")
    p.set_defaults(fn=cmd_ablate_tile_size)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, WorkloadError, hm.HostModelError, eng.EngineError,
            TilerError, TopologyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
