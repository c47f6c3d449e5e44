"""Token-level latency, data-movement, and energy composition.

The flash GeMV stream and the plain-read stream feeding the NPU run
concurrently and are balanced by the tiler's alpha, so each weight matrix
costs max(flash pipeline time, NPU stream time).  KV-cache work is
DRAM-bandwidth bound and serializes with the GeMV work inside each layer;
SFU work rides along on the NPU.

Two evaluation modes share the same composition:

* analytic  - per-matrix times from steady-state rates calibrated against
  a short engine window (round period and achieved read bandwidth), cheap
  enough for sweeps over whole model families.
* simulate  - every matrix is scheduled through the event engine.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

from . import engine as eng
from .hwconfig import EnergyCoefficients, SystemConfig
from .tiler import (TileShape, analytic_rates, compute_alpha,
                    flash_page_share, optimal_tile_shape)
from .topology import build_device
from .workload import DecodeGraph, ModelSpec, build_decode_graph


class HostModelError(ValueError):
    pass


@dataclass(frozen=True)
class NpuModel:
    ops_per_us: float
    systolic_dims: tuple = (16, 16)   # reference design; documentation only
    ingest_bw: float = 0.0            # bytes/us deliverable by the channels


@dataclass(frozen=True)
class BaselineModel:
    """Flash-offload baseline: weights staged through DRAM every token."""
    interface_bw: float = 4000.0      # bytes/us (UFS-class 4 GB/s)
    dram_staging: bool = True
    transfer_multiplier: float = 3.5  # staged copies per weight byte, >3x

    def __post_init__(self):
        if self.transfer_multiplier < 1.0:
            raise HostModelError("transfer multiplier must be >= 1")
        if self.interface_bw <= 0:
            raise HostModelError("interface bandwidth must be > 0")


@dataclass
class TokenReport:
    latency_us: float
    tokens_per_s: float
    flash_pipeline_us: float
    npu_stream_us: float
    npu_compute_us: float
    kv_us: float
    sfu_us: float
    bytes_flash_channel: int
    bytes_rc_traffic: int
    bytes_npu_reads: int
    bytes_dram: int
    bytes_padded: int
    energy_pj: dict = field(default_factory=dict)
    energy_total_pj: float = 0.0
    utilization: float = 0.0
    alpha: float = 0.0
    flash_byte_fraction: float = 0.0
    tile: str = ""
    strategy: str = "c"
    mode: str = "analytic"
    seq_len: int = 0
    model: str = ""
    analytic_ceiling_tokens_per_s: float = 0.0
    ceiling_gap: float = 0.0

    def to_record(self) -> dict:
        rec = {k: v for k, v in self.__dict__.items()}
        rec["energy_pj"] = dict(self.energy_pj)
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


@dataclass(frozen=True)
class Calibration:
    period_us: float          # steady read-compute round period
    read_bw_per_channel: float  # bytes/us of plain-read payload delivered
    strategy: str


@lru_cache(maxsize=64)
def calibrate(cfg: SystemConfig, shape: TileShape, strategy: str,
              rounds: int = 96, slice_bytes: int = eng.DEFAULT_SLICE_BYTES,
              read_window: int = eng.DEFAULT_READ_WINDOW) -> Calibration:
    """Measure steady-state rates from a short mixed-traffic engine window."""
    rates = analytic_rates(shape, cfg)
    alpha, _ = compute_alpha(rates, cfg)
    device = build_device(cfg)
    reqs = eng.make_rc_stream(cfg, shape, rounds)
    n_reads = math.ceil(rounds * (1 - alpha) / alpha) * cfg.flash.channel_num
    reqs += eng.make_read_stream(cfg, n_reads, start_index=1_000_000)
    t = eng.schedule(reqs, device, strategy=strategy, slice_bytes=slice_bytes,
                     read_window=read_window)

    per_core = {}
    for e in t.events:
        if e.action == "compute":
            per_core.setdefault(e.resource, []).append(e.end_ns)
    periods = []
    for ends in per_core.values():
        ends.sort()
        n = len(ends)
        periods += [ends[i + 1] - ends[i] for i in range(n // 4, 3 * n // 4 - 1)]
    period_us = (sum(periods) / len(periods)) / 1000 if periods else rates.t_rc

    rc_start = min(e.end_ns for e in t.events if e.action == "compute")
    rc_end = max(e.end_ns for e in t.events if e.action == "compute")
    w0 = rc_start + (rc_end - rc_start) // 4
    payload = sum(e.end_ns - e.start_ns for e in t.events
                  if e.action == "read-payload" and w0 <= e.end_ns <= rc_end)
    window_us = (rc_end - w0) / 1000
    read_bw = (payload / 1000) * cfg.timing.bw_channel / window_us \
        / cfg.flash.channel_num if window_us > 0 else 0.0
    return Calibration(period_us=period_us, read_bw_per_channel=read_bw,
                       strategy=strategy)


def _matrix_page_counts(rows, cols, cfg, shape, fraction, cal=None):
    """Page split for one matrix, refined to whole scheduling rounds.

    The target fraction gives a fractional round count; with the stream
    rates in hand we pick whichever neighboring integer balances the flash
    pipeline against the NPU stream for this matrix - on wide devices a
    single 30 us round moves hundreds of pages, so blind rounding can dump
    a large remainder onto the slower stream.
    """
    ar, ac = shape.atomic_rows(cfg), shape.atomic_cols(cfg)
    grid = math.ceil(rows / ar) * math.ceil(cols / ac)
    padded = grid * cfg.flash.page_size - math.ceil(
        rows * cols * cfg.quant.weight_bits / 8)
    if cal is None:
        flash_pages = flash_page_share(grid, fraction, cfg)
        return grid, flash_pages, grid - flash_pages, padded
    cores = cfg.flash.total_cores
    if fraction >= 1.0:
        return grid, grid, 0, padded
    target = fraction * grid / cores
    read_bw = max(cal.read_bw_per_channel * cfg.flash.channel_num, 1e-9)
    best = None
    for rounds in {math.floor(target), math.ceil(target)}:
        fpages = min(grid, max(0, rounds) * cores)
        f_us = _flash_stream_us(math.ceil(fpages / cores) if fpages else 0,
                                cfg, shape, cal.period_us)
        n_us = (grid - fpages) * cfg.flash.page_size / read_bw
        cost = max(f_us, n_us)
        if best is None or cost < best[0]:
            best = (cost, fpages)
    return grid, best[1], grid - best[1], padded


def _flash_stream_us(rounds: int, cfg: SystemConfig, shape: TileShape,
                     period_us: float) -> float:
    """First-round latency plus one period per further round, plus the
    final result drain."""
    if rounds == 0:
        return 0.0
    bw = cfg.timing.bw_channel
    in_us = shape.input_bytes_per_channel(cfg) / bw
    out_us = shape.result_bytes_per_channel(cfg) / bw
    return (in_us + cfg.timing.t_read + cfg.compute_time_us
            + (rounds - 1) * period_us + out_us)


def _simulate_matrix_us(cfg, shape, rounds, npu_pages, strategy,
                        slice_bytes, read_window) -> float:
    device = build_device(cfg)
    reqs = eng.make_rc_stream(cfg, shape, rounds)
    reqs += eng.make_read_stream(cfg, npu_pages, start_index=1_000_000)
    if not reqs:
        return 0.0
    t = eng.schedule(reqs, device, strategy=strategy, slice_bytes=slice_bytes,
                     read_window=read_window)
    return t.makespan_ns / 1000


def token_latency(cfg: SystemConfig, model: ModelSpec, seq_len: int,
                  mode: str = "analytic", strategy: str = "c",
                  shape: TileShape | None = None,
                  alpha_mode: str = "formula",
                  fraction_override: float | None = None,
                  slice_bytes: int = eng.DEFAULT_SLICE_BYTES,
                  read_window: int = eng.DEFAULT_READ_WINDOW,
                  calibration_rounds: int = 96) -> TokenReport:
    """Per-token latency and traffic for one model on one configuration."""
    if mode not in ("analytic", "simulate"):
        raise HostModelError(f"unknown mode {mode!r}")
    if model.param_count == 0:
        raise HostModelError("model has no weights")
    shape = shape or optimal_tile_shape(cfg)
    shape.validate(cfg)
    rates = analytic_rates(shape, cfg)  # raises if rate_rc >= 1
    alpha, fraction = compute_alpha(rates, cfg)
    if fraction_override is not None:
        fraction = fraction_override
    elif alpha_mode == "autotune":
        fraction = _autotune_fraction(cfg, model, seq_len, shape, strategy,
                                      slice_bytes, read_window,
                                      calibration_rounds)
    elif alpha_mode != "formula":
        raise HostModelError(f"unknown alpha mode {alpha_mode!r}")

    cal = calibrate(cfg, shape, strategy if strategy != "a" else "c",
                    calibration_rounds, slice_bytes, read_window)
    graph = build_decode_graph(model, seq_len, cfg.quant)
    return _compose(cfg, model, graph, shape, alpha, fraction, cal, mode,
                    strategy, slice_bytes, read_window, seq_len)


def _compose(cfg, model, graph: DecodeGraph, shape, alpha, fraction, cal,
             mode, strategy, slice_bytes, read_window, seq_len) -> TokenReport:
    bw = cfg.timing.bw_channel
    ch = cfg.flash.channel_num
    total_cores = cfg.flash.total_cores
    page = cfg.flash.page_size
    npu_ops = cfg.host.npu_ops_per_us
    read_bw_total = cal.read_bw_per_channel * ch

    flash_us = npu_stream_us = npu_compute_us = 0.0
    rc_bytes = npu_bytes = padded_total = 0
    gemv_us = 0.0
    flash_ops = 0

    for op in graph.ops:
        if op.group != "flash_npu_gemv":
            continue
        m = op.matrix
        grid, fpages, npages, padded = _matrix_page_counts(
            m.rows, m.cols, cfg, shape, fraction, cal)
        rounds = math.ceil(fpages / total_cores) if fpages else 0
        if mode == "simulate":
            f_us = n_us = _simulate_matrix_us(cfg, shape, rounds, npages,
                                              strategy, slice_bytes,
                                              read_window)
            matrix_us = f_us
            c_us = npages * page * 2 * 8 / cfg.quant.weight_bits / npu_ops
        else:
            f_us = _flash_stream_us(rounds, cfg, shape, cal.period_us)
            n_transfer = npages * page / read_bw_total if npages else 0.0
            c_us = npages * page * 2 * 8 / cfg.quant.weight_bits / npu_ops
            n_us = max(n_transfer, c_us)
            matrix_us = max(f_us, n_us)
        flash_us += f_us
        npu_stream_us += n_us
        npu_compute_us += c_us
        gemv_us += matrix_us
        rc_bytes += (rounds * shape.w_req * cfg.quant.activation_bytes
                     + fpages * shape.atomic_rows(cfg) * cfg.quant.activation_bytes)
        npu_bytes += npages * page
        padded_total += padded
        flash_ops += fpages * cfg.page_ops

    kv_bytes = graph.kv_bytes
    kv_ops = graph.total("npu_kv", "ops")
    kv_us = max(kv_bytes / cfg.host.dram_bw, kv_ops / npu_ops)
    sfu_us = graph.total("sfu", "ops") / npu_ops

    latency = gemv_us + kv_us + sfu_us
    rep = TokenReport(
        latency_us=latency,
        tokens_per_s=1e6 / latency,
        flash_pipeline_us=flash_us,
        npu_stream_us=npu_stream_us,
        npu_compute_us=npu_compute_us,
        kv_us=kv_us,
        sfu_us=sfu_us,
        bytes_flash_channel=rc_bytes + npu_bytes,
        bytes_rc_traffic=rc_bytes,
        bytes_npu_reads=npu_bytes,
        bytes_dram=kv_bytes,
        bytes_padded=padded_total,
        utilization=(rc_bytes + npu_bytes) / (ch * bw * latency),
        alpha=alpha,
        flash_byte_fraction=fraction,
        tile=f"{shape.h_req}x{shape.w_req}",
        strategy=strategy,
        mode=mode,
        seq_len=seq_len,
        model=model.name,
    )
    rep.energy_pj = energy_report(rep, cfg.energy,
                                  total_ops=2 * model.param_count + kv_ops)
    rep.energy_total_pj = sum(rep.energy_pj.values())
    ceiling = analytic_ceiling(cfg, model, fraction, seq_len)
    rep.analytic_ceiling_tokens_per_s = ceiling
    rep.ceiling_gap = rep.tokens_per_s / ceiling - 1.0
    return rep


def _autotune_fraction(cfg, model, seq_len, shape, strategy, slice_bytes,
                       read_window, calibration_rounds) -> float:
    """Sweep the flash byte fraction +-20% and keep the best throughput."""
    rates = analytic_rates(shape, cfg)
    _, f0 = compute_alpha(rates, cfg)
    cal = calibrate(cfg, shape, strategy if strategy != "a" else "c",
                    calibration_rounds, slice_bytes, read_window)
    graph = build_decode_graph(model, seq_len, cfg.quant)
    best = None
    for i in range(9):
        f = min(1.0, max(0.0, f0 * (0.8 + 0.05 * i)))
        rep = _compose(cfg, model, graph, shape, rates.t_r / (rates.t_r + rates.t_rc),
                       f, cal, "analytic", strategy, slice_bytes, read_window,
                       seq_len)
        if best is None or rep.tokens_per_s > best[0]:
            best = (rep.tokens_per_s, f)
    return best[1]


def analytic_ceiling(cfg: SystemConfig, model: ModelSpec, fraction: float,
                     seq_len: int) -> float:
    """Upper bound on tokens/s: each weight stream at its peak rate plus the
    DRAM floor for the KV cache; simulated latency can only be worse."""
    w = model.weight_bytes_total(cfg.quant)
    shape = optimal_tile_shape(cfg)
    rates = analytic_rates(shape, cfg)
    flash_floor = fraction * w / cfg.aggregate_core_bw
    stream_bw = (1 - rates.rate_rc) * cfg.timing.bw_channel * cfg.flash.channel_num
    npu_floor = (1 - fraction) * w / stream_bw
    kv_floor = model.kv_bytes_per_token(seq_len, cfg.quant) / cfg.host.dram_bw
    return 1e6 / (max(flash_floor, npu_floor) + kv_floor)


def baseline_token_latency(model: ModelSpec, cfg: SystemConfig,
                           baseline: BaselineModel | None = None) -> dict:
    """Analytic flash-offload baseline: weights staged to DRAM each token."""
    if model.param_count == 0:
        raise HostModelError("model has no weights")
    baseline = baseline or BaselineModel()
    w = model.weight_bytes_total(cfg.quant)
    latency = w * baseline.transfer_multiplier / baseline.interface_bw
    bytes_moved = round(w * baseline.transfer_multiplier)
    energy = {
        "interconnect": bytes_moved * cfg.energy.baseline_pj_per_byte,
        "compute": 2 * model.param_count * cfg.energy.compute_pj_per_op,
    }
    return {
        "model": model.name,
        "latency_us": latency,
        "tokens_per_s": 1e6 / latency,
        "theoretical_ceiling_tokens_per_s": 1e6 / (w / baseline.interface_bw),
        "bytes_moved": bytes_moved,
        "energy_pj": energy,
        "energy_total_pj": sum(energy.values()),
    }


def energy_report(report: TokenReport, coeffs: EnergyCoefficients,
                  total_ops: int = 0) -> dict:
    """Per-path energy: bytes times path coefficient plus compute."""
    chan = report.bytes_flash_channel
    return {
        "flash_channel": chan * coeffs.flash_channel_pj_per_byte,
        "d2d": chan * coeffs.d2d_pj_per_byte,
        "dram": report.bytes_dram * coeffs.dram_pj_per_byte,
        "compute": total_ops * coeffs.compute_pj_per_op,
    }


def data_movement_ratio(model: ModelSpec, cfg: SystemConfig, seq_len: int,
                        baseline: BaselineModel | None = None) -> float:
    """Baseline bytes over hybrid bytes, per token."""
    rep = token_latency(cfg, model, seq_len)
    base = baseline_token_latency(model, cfg, baseline)
    ours = rep.bytes_flash_channel + rep.bytes_dram
    return base["bytes_moved"] / ours
