"""Hardware-aware tile shaping and flash/NPU workload partitioning.

Each read-compute round processes one tile of the weight matrix: every
compute core handles a page-sized "atomic tile", cores on one channel share
a broadcast input segment, and the channel returns the concatenated result
rows.  The tile shape fixes the channel traffic per round and therefore the
split of weight bytes between the in-flash GeMV path and the plain-read
stream that feeds the NPU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .hwconfig import SystemConfig


class TilerError(ValueError):
    pass


class InfeasibleConfigError(TilerError):
    """Read-compute traffic alone would saturate the channel."""


@dataclass(frozen=True)
class TileShape:
    h_req: int  # output rows per tile
    w_req: int  # input columns per tile

    def validate(self, cfg: SystemConfig) -> None:
        ch, cc = cfg.flash.channel_num, cfg.flash.ccore_num
        if self.h_req % cc:
            raise TilerError(f"h_req {self.h_req} not divisible by ccore_num {cc}")
        if self.w_req % ch:
            raise TilerError(f"w_req {self.w_req} not divisible by channel_num {ch}")
        if (self.h_req // cc) * (self.w_req // ch) != cfg.elements_per_page:
            raise TilerError(
                f"atomic tile {self.h_req // cc}x{self.w_req // ch} does not hold "
                f"exactly one page ({cfg.elements_per_page} elements)")

    def atomic_rows(self, cfg: SystemConfig) -> int:
        return self.h_req // cfg.flash.ccore_num

    def atomic_cols(self, cfg: SystemConfig) -> int:
        return self.w_req // cfg.flash.channel_num

    def input_bytes_per_channel(self, cfg: SystemConfig) -> int:
        return self.atomic_cols(cfg) * cfg.quant.activation_bytes

    def result_bytes_per_core(self, cfg: SystemConfig) -> int:
        return self.atomic_rows(cfg) * cfg.quant.activation_bytes

    def result_bytes_per_channel(self, cfg: SystemConfig) -> int:
        return self.h_req * cfg.quant.activation_bytes


@dataclass(frozen=True)
class AnalyticRates:
    t_rc: float      # us, read-compute request time (read + input transfer)
    t_r: float       # us, plain read time on the leftover bandwidth
    rate_rc: float   # channel utilization of the read-compute stream
    trans: int       # bytes on the channel per tile, broadcast scheme
    trans_alt: int   # bytes per tile without input broadcast


@dataclass(frozen=True)
class FlashTile:
    """One scheduling round: (band, row-block) cell per participating core."""
    index: int
    pages: tuple  # ((channel, core, grid_row, grid_col), ...)


@dataclass
class TilingPlan:
    shape: TileShape
    alpha: float
    flash_byte_fraction: float
    h_weight: int
    w_weight: int
    grid_rows: int
    grid_cols: int
    flash_pages: int
    npu_pages: int
    flash_tiles: list = field(default_factory=list)   # list[FlashTile]
    npu_page_cells: list = field(default_factory=list)  # [(grid_row, grid_col)]
    padded_bytes: int = 0

    @property
    def total_pages(self) -> int:
        return self.grid_rows * self.grid_cols

    def matrix_bytes(self, cfg: SystemConfig) -> int:
        return math.ceil(self.h_weight * self.w_weight * cfg.quant.weight_bits / 8)


def _feasible_shapes(cfg: SystemConfig):
    ch, cc = cfg.flash.channel_num, cfg.flash.ccore_num
    elems = cfg.elements_per_page
    a = 1
    while a * a <= elems:
        if elems % a == 0:
            yield TileShape(cc * a, ch * (elems // a))
            if a != elems // a:
                yield TileShape(cc * (elems // a), ch * a)
        a += 1


def trans_volume(shape: TileShape, cfg: SystemConfig, scheme: str = "broadcast") -> int:
    """Channel bytes moved per tile: input vectors in, result vectors out."""
    act = cfg.quant.activation_bytes
    ch, cc = cfg.flash.channel_num, cfg.flash.ccore_num
    if scheme == "broadcast":
        return shape.w_req * act + ch * shape.h_req * act
    if scheme == "no_broadcast":
        return cc * shape.w_req * act + ch * shape.h_req * act
    raise TilerError(f"unknown scheme {scheme!r}")


def double_buffers(shape: TileShape, cfg: SystemConfig) -> bool:
    """Whether two rounds' vectors coexist in the combined core buffer.

    Without that headroom the next round's input cannot be fetched under
    the current compute and the pipeline exposes every array read.
    """
    per_round = (shape.input_bytes_per_channel(cfg)
                 + shape.result_bytes_per_core(cfg))
    return 2 * per_round <= cfg.host.input_output_buffer


def optimal_tile_shape(cfg: SystemConfig) -> TileShape:
    """Tile shape minimizing per-tile channel traffic.

    The continuous optimum is h = sqrt(ccore_num * elements_per_page) with
    w = channel_num * h, but it is not always integral; we enumerate every
    divisor-feasible shape and take the minimum, breaking ties toward the
    smaller w_req (smaller per-core input vectors).  Shapes whose vectors
    cannot double-buffer in the core's combined buffer are only considered
    when nothing else fits.
    """
    candidates = list(_feasible_shapes(cfg))
    buffered = [s for s in candidates if double_buffers(s, cfg)]
    best = None
    for shape in buffered or candidates:
        t = trans_volume(shape, cfg)
        if best is None or t < best[0] or (t == best[0] and shape.w_req < best[1].w_req):
            best = (t, shape)
    assert best is not None
    best[1].validate(cfg)
    return best[1]


def continuous_trans_bound(cfg: SystemConfig) -> float:
    """Lower bound on trans_volume over all (even fractional) shapes."""
    act = cfg.quant.activation_bytes
    return 2 * cfg.flash.channel_num * math.sqrt(
        cfg.flash.ccore_num * cfg.elements_per_page) * act


def analytic_rates(shape: TileShape, cfg: SystemConfig) -> AnalyticRates:
    """Request-time model of the channel under a mixed RC/read schedule."""
    shape.validate(cfg)
    bw = cfg.timing.bw_channel
    ch = cfg.flash.channel_num
    act = cfg.quant.activation_bytes
    t_rc = cfg.timing.t_read + shape.w_req * act / (ch * bw)
    rate_rc = (shape.h_req * act + shape.w_req * act / ch) / (cfg.timing.t_read * bw)
    if rate_rc >= 1.0:
        raise InfeasibleConfigError(
            f"rate_rc={rate_rc:.3f} >= 1: read-compute traffic saturates the channel")
    t_r = cfg.flash.page_size / ((1.0 - rate_rc) * bw)
    return AnalyticRates(
        t_rc=t_rc, t_r=t_r, rate_rc=rate_rc,
        trans=trans_volume(shape, cfg, "broadcast"),
        trans_alt=trans_volume(shape, cfg, "no_broadcast"),
    )


def compute_alpha(rates: AnalyticRates, cfg: SystemConfig) -> tuple:
    """Round fraction alpha and its byte-level consequence.

    alpha = t_r / (t_r + t_rc) balances the time spent on read-compute
    rounds against plain-read rounds.  One read-compute round moves
    channel_num*ccore_num pages into the cores while one read round moves
    channel_num pages to the NPU, so the byte fraction routed to flash is
    alpha*ccore / (alpha*ccore + (1-alpha)).
    """
    alpha = rates.t_r / (rates.t_r + rates.t_rc)
    cc = cfg.flash.ccore_num
    fraction = alpha * cc / (alpha * cc + (1.0 - alpha))
    return alpha, fraction


def flash_page_share(total_pages: int, fraction: float, cfg: SystemConfig) -> int:
    """Flash-assigned atomic tiles, rounded to whole scheduling rounds.

    Rounding the share to an integer round count keeps the comparison
    between tile shapes fair: a trailing round carrying a handful of pages
    costs a full array read but relieves the NPU stream of almost nothing.
    The share is capped at the whole matrix, and fraction 1.0 always takes
    everything.
    """
    cores = cfg.flash.total_cores
    if fraction >= 1.0:
        return total_pages
    rounds = round(fraction * total_pages / cores)
    return min(total_pages, rounds * cores)


def partition_matrix(h_weight: int, w_weight: int, cfg: SystemConfig,
                     shape: TileShape | None = None,
                     fraction: float | None = None) -> TilingPlan:
    """Split one weight matrix between the flash GeMV path and the NPU.

    The matrix is cut into a grid of page-sized atomic tiles (zero-padded on
    ragged edges; padded bytes are counted in traffic and reported).  Flash
    receives the byte fraction rounded to whole scheduling rounds, grouped
    one page per core where all pages a channel serves in a round come
    from the same column band (so the input broadcast is shared).  The
    remaining cells become the NPU plain-read page list, row-major.
    """
    if h_weight < 1 or w_weight < 1:
        raise TilerError("matrix dimensions must be >= 1")
    if shape is None:
        shape = optimal_tile_shape(cfg)
    shape.validate(cfg)
    if fraction is None:
        alpha, fraction = compute_alpha(analytic_rates(shape, cfg), cfg)
    else:
        alpha, _ = compute_alpha(analytic_rates(shape, cfg), cfg)
    if not 0.0 <= fraction <= 1.0:
        raise TilerError(f"flash fraction {fraction} outside [0, 1]")

    ar, ac = shape.atomic_rows(cfg), shape.atomic_cols(cfg)
    grid_rows = math.ceil(h_weight / ar)
    grid_cols = math.ceil(w_weight / ac)
    total_pages = grid_rows * grid_cols
    page_bytes = cfg.flash.page_size
    padded_bytes = total_pages * page_bytes - math.ceil(
        h_weight * w_weight * cfg.quant.weight_bits / 8)

    flash_pages = flash_page_share(total_pages, fraction, cfg)
    ch, cc = cfg.flash.channel_num, cfg.flash.ccore_num

    # Column bands are dealt round-robin to channels; each channel consumes
    # its bands row-block by row-block, ccore pages per round.
    band_cells = [[(r, c) for r in range(grid_rows)] for c in range(grid_cols)]
    chan_cells = [[] for _ in range(ch)]
    for c, cells in enumerate(band_cells):
        chan_cells[c % ch].extend(cells)

    cursors = [0] * ch
    taken = 0
    tiles = []
    while taken < flash_pages:
        pages = []
        for channel in range(ch):
            for core in range(cc):
                if taken >= flash_pages:
                    break
                idx = cursors[channel]
                if idx >= len(chan_cells[channel]):
                    break  # this channel's bands are exhausted
                r, c = chan_cells[channel][idx]
                cursors[channel] = idx + 1
                pages.append((channel, core, r, c))
                taken += 1
        if not pages:  # all channel queues drained; total cells >= flash_pages
            break
        tiles.append(FlashTile(index=len(tiles), pages=tuple(pages)))

    flash_set = {(r, c) for t in tiles for (_, _, r, c) in t.pages}
    npu_cells = [(r, c) for r in range(grid_rows) for c in range(grid_cols)
                 if (r, c) not in flash_set]

    return TilingPlan(
        shape=shape, alpha=alpha, flash_byte_fraction=fraction,
        h_weight=h_weight, w_weight=w_weight,
        grid_rows=grid_rows, grid_cols=grid_cols,
        flash_pages=flash_pages, npu_pages=total_pages - flash_pages,
        flash_tiles=tiles, npu_page_cells=npu_cells,
        padded_bytes=padded_bytes,
    )


def plan_rounds(plan: TilingPlan, cfg: SystemConfig) -> int:
    """Scheduling rounds needed for the plan's flash pages."""
    return math.ceil(plan.flash_pages / cfg.flash.total_cores) if plan.flash_pages else 0


def dump_plan(plan: TilingPlan) -> str:
    lines = [
        f"tile {plan.shape.h_req}x{plan.shape.w_req} alpha={plan.alpha:.4f} "
        f"flash_fraction={plan.flash_byte_fraction:.4f}",
        f"matrix {plan.h_weight}x{plan.w_weight} grid {plan.grid_rows}x{plan.grid_cols} "
        f"flash_pages={plan.flash_pages} npu_pages={plan.npu_pages} "
        f"padded_bytes={plan.padded_bytes}",
    ]
    for tile in plan.flash_tiles:
        cells = " ".join(f"ch{ch}.c{co}:({r},{c})" for ch, co, r, c in tile.pages)
        lines.append(f"tile[{tile.index}] {cells}")
    if plan.npu_page_cells:
        lines.append("npu " + " ".join(f"({r},{c})" for r, c in plan.npu_page_cells))
    return "\n".join(lines) + "\n"
