"""Flash device tree and the placement of model weights onto pages.

Read-compute streams pin each die's plane 0: the data/cache register pair
of a single plane already pipelines consecutive array reads against the
shared core, and keeping plane 1 free of GeMV tiles is what lets it serve
the plain-read stream feeding the NPU.  NPU-portion pages stripe
round-robin across channels (channel-major, then chip, then die) to keep
plain reads spread over every channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .hwconfig import SystemConfig
from .tiler import TilingPlan


class TopologyError(ValueError):
    pass


class CapacityError(TopologyError):
    pass


RC_PLANE = 0  # plane reserved for read-compute tiles on every die


@dataclass(frozen=True)
class FlashAddress:
    channel: int
    chip: int
    die: int
    plane: int
    block: int
    page: int

    def validate(self, cfg: SystemConfig) -> None:
        g = cfg.flash
        bounds = (g.channel_num, g.chips_per_channel, g.dies_per_chip,
                  g.planes_per_die, g.blocks_per_plane, g.block_pages)
        for value, bound, name in zip(
                (self.channel, self.chip, self.die, self.plane, self.block, self.page),
                bounds,
                ("channel", "chip", "die", "plane", "block", "page")):
            if not 0 <= value < bound:
                raise TopologyError(f"{name} index {value} out of range [0, {bound})")

    @property
    def plane_key(self):
        return (self.channel, self.chip, self.die, self.plane)

    @property
    def die_key(self):
        return (self.channel, self.chip, self.die)


@dataclass
class PlaneState:
    """Register pair of one plane; times are engine-owned, ns."""
    data_busy_until: int = 0
    cache_busy_until: int = 0
    next_free_page: int = 0  # bump allocator for layout


@dataclass
class ComputeCoreState:
    die: tuple = ()
    busy_until: int = 0
    input_occupancy: int = 0
    output_occupancy: int = 0


@dataclass
class DeviceTree:
    config: SystemConfig
    planes: dict = field(default_factory=dict)  # plane_key -> PlaneState
    cores: dict = field(default_factory=dict)   # die_key -> ComputeCoreState

    @property
    def core_count(self) -> int:
        return len(self.cores)

    @property
    def plane_count(self) -> int:
        return len(self.planes)

    def dies_of_channel(self, channel: int):
        g = self.config.flash
        return [(channel, chip, die)
                for chip in range(g.chips_per_channel)
                for die in range(g.dies_per_chip)]

    def core_of(self, channel: int, core_index: int):
        """Key of a channel's n-th compute core: (channel, chip, die, slot)."""
        g = self.config.flash
        die_idx, slot = divmod(core_index, g.ccores_per_die)
        return (*self.dies_of_channel(channel)[die_idx], slot)

    def reset(self) -> None:
        for p in self.planes.values():
            p.data_busy_until = 0
            p.cache_busy_until = 0
        for c in self.cores.values():
            c.busy_until = 0
            c.input_occupancy = 0
            c.output_occupancy = 0


def build_device(config: SystemConfig) -> DeviceTree:
    """Instantiate all channels/chips/dies/planes/cores, idle."""
    g = config.flash
    dev = DeviceTree(config=config)
    for ch in range(g.channel_num):
        for chip in range(g.chips_per_channel):
            for die in range(g.dies_per_chip):
                for slot in range(g.ccores_per_die):
                    key = (ch, chip, die, slot)
                    dev.cores[key] = ComputeCoreState(die=(ch, chip, die))
                for plane in range(g.planes_per_die):
                    dev.planes[(ch, chip, die, plane)] = PlaneState()
    return dev


@dataclass
class WeightLayout:
    tile_pages: dict = field(default_factory=dict)  # (matrix, tile, core_slot) -> addr
    npu_pages: dict = field(default_factory=dict)   # (matrix, page_idx) -> addr
    mapped_pages: int = 0

    def all_addresses(self):
        yield from self.tile_pages.values()
        yield from self.npu_pages.values()


def _alloc(dev: DeviceTree, plane_key, cfg: SystemConfig) -> FlashAddress:
    state = dev.planes[plane_key]
    g = cfg.flash
    idx = state.next_free_page
    block, page = divmod(idx, g.block_pages)
    if block >= g.blocks_per_plane:
        raise CapacityError(
            f"plane {plane_key} out of pages ({g.blocks_per_plane * g.block_pages})")
    state.next_free_page += 1
    return FlashAddress(plane_key[0], plane_key[1], plane_key[2], plane_key[3],
                        block, page)


def layout_weights(plans, device: DeviceTree,
                   layout: WeightLayout | None = None) -> WeightLayout:
    """Place every matrix plan's pages onto the device.

    plans: iterable of (matrix_name, TilingPlan).  Atomic tiles of one round
    land on distinct compute cores (plane 0 of the core's die); NPU pages
    stripe channel-major round-robin over each die's remaining planes.
    """
    cfg = device.config
    g = cfg.flash
    layout = layout or WeightLayout()

    npu_plane_ring = []
    for chip in range(g.chips_per_channel):
        for die in range(g.dies_per_chip):
            for plane in range(g.planes_per_die):
                if plane != RC_PLANE or g.planes_per_die == 1:
                    npu_plane_ring.append((chip, die, plane))
    rr = 0

    for name, plan in plans:
        plan_t: TilingPlan = plan
        for tile in plan_t.flash_tiles:
            seen_cores = set()
            for channel, core, r, c in tile.pages:
                if (channel, core) in seen_cores:
                    raise TopologyError(
                        f"tile {tile.index} of {name} assigns core twice")
                seen_cores.add((channel, core))
                die_key = device.core_of(channel, core)[:3]
                addr = _alloc(device, (*die_key, RC_PLANE), cfg)
                layout.tile_pages[(name, tile.index, (channel, core))] = addr
                layout.mapped_pages += 1
        for idx, _cell in enumerate(plan_t.npu_page_cells):
            channel = (rr + idx) % g.channel_num
            chip, die, plane = npu_plane_ring[((rr + idx) // g.channel_num)
                                              % len(npu_plane_ring)]
            addr = _alloc(device, (channel, chip, die, plane), cfg)
            layout.npu_pages[(name, idx)] = addr
            layout.mapped_pages += 1
        rr += len(plan_t.npu_page_cells)
    return layout


def dump_layout(layout: WeightLayout) -> str:
    """Diagnostic table: matrix, tile/page, core, address."""
    lines = ["kind\tmatrix\tslot\tcore\taddress"]
    for (name, tile, core), a in sorted(layout.tile_pages.items()):
        lines.append(f"tile\t{name}\t{tile}\tch{core[0]}.c{core[1]}\t"
                     f"({a.channel},{a.chip},{a.die},{a.plane},{a.block},{a.page})")
    for (name, idx), a in sorted(layout.npu_pages.items()):
        lines.append(f"npu\t{name}\t{idx}\t-\t"
                     f"({a.channel},{a.chip},{a.die},{a.plane},{a.block},{a.page})")
    return "\n".join(lines) + "\n"
