"""Hardware and model configuration: the single source of truth.

Parses a line-oriented INI-style document with sections [flash], [timing],
[host], [quant], [energy], validates every field, and derives the quantities
the rest of the toolkit consumes (channel bandwidth, cores per channel,
elements per page, compute-core throughput).

Unit conventions are decimal throughout: 1 MB = 10^6 bytes, 1 GB/s =
1000 bytes/us.  The simulator clock ticks in integer nanoseconds, so all
microsecond-level parameters convert exactly.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    """Malformed or invalid configuration document."""


@dataclass(frozen=True)
class FlashGeometry:
    channel_num: int
    chips_per_channel: int
    dies_per_chip: int
    planes_per_die: int
    ccores_per_die: int
    page_size: int
    spare_size: int = 1664
    block_pages: int = 256
    blocks_per_plane: int = 1024  # capacity bound for layout checks

    def __post_init__(self):
        for name in ("channel_num", "chips_per_channel", "dies_per_chip",
                     "planes_per_die", "ccores_per_die", "block_pages",
                     "blocks_per_plane"):
            if getattr(self, name) < 1:
                raise ConfigError(f"flash.{name} must be >= 1, got {getattr(self, name)}")
        if self.page_size < 4096 or self.page_size & (self.page_size - 1):
            raise ConfigError(f"flash.page_size must be a power of two >= 4096, got {self.page_size}")
        if self.spare_size < 0:
            raise ConfigError(f"flash.spare_size must be >= 0, got {self.spare_size}")

    @property
    def ccore_num(self) -> int:
        """Compute cores attached to each channel."""
        return self.chips_per_channel * self.dies_per_chip * self.ccores_per_die

    @property
    def total_cores(self) -> int:
        return self.channel_num * self.ccore_num

    @property
    def plane_capacity_bytes(self) -> int:
        return self.blocks_per_plane * self.block_pages * self.page_size


@dataclass(frozen=True)
class FlashTiming:
    t_read: float          # us, array read latency (tR)
    channel_rate: int      # transfers/s
    bus_width: int         # bits

    def __post_init__(self):
        if self.t_read <= 0:
            raise ConfigError(f"timing.t_read must be > 0, got {self.t_read}")
        if self.channel_rate <= 0 or self.bus_width <= 0:
            raise ConfigError("timing.channel_rate and timing.bus_width must be > 0")

    @property
    def bw_channel(self) -> float:
        """Channel bandwidth in bytes/us: channel_rate * bus_width / 8 / 10^6."""
        return self.channel_rate * self.bus_width / 8 / 1e6


@dataclass(frozen=True)
class HostConfig:
    npu_ops_per_us: float = 2_000_000.0   # 2 TOPS
    dram_bw: float = 40_000.0             # bytes/us, ~40 GB/s LPDDR5X
    input_output_buffer: int = 2048       # bytes, combined per compute core
    core_ops_per_us: float = 0.0          # 0 -> derived as page_ops / t_read

    def __post_init__(self):
        if self.npu_ops_per_us <= 0 or self.dram_bw <= 0 or self.input_output_buffer <= 0:
            raise ConfigError("host parameters must be > 0")
        if self.core_ops_per_us < 0:
            raise ConfigError("host.core_ops_per_us must be >= 0 (0 = derive)")


@dataclass(frozen=True)
class QuantizationSpec:
    weight_bits: int = 8
    activation_bits: int = 8

    def __post_init__(self):
        if self.weight_bits not in (4, 8):
            raise ConfigError(f"quant.weight_bits must be 4 or 8, got {self.weight_bits}")
        if self.activation_bits not in (8, 16):
            raise ConfigError(f"quant.activation_bits must be 8 or 16, got {self.activation_bits}")

    @property
    def weight_bytes(self) -> float:
        return self.weight_bits / 8

    @property
    def activation_bytes(self) -> int:
        return self.activation_bits // 8


@dataclass(frozen=True)
class EnergyCoefficients:
    """Per-byte transfer energy and per-op compute energy, in pJ.

    Placeholders consistent with data movement costing 100-500x more than
    compute; only ratios between configurations are ever asserted.
    """
    flash_channel_pj_per_byte: float = 1.0
    d2d_pj_per_byte: float = 1.0
    dram_pj_per_byte: float = 4.0
    baseline_pj_per_byte: float = 10.0
    compute_pj_per_op: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"energy.{f.name} must be >= 0")


@dataclass(frozen=True)
class SystemConfig:
    flash: FlashGeometry
    timing: FlashTiming
    host: HostConfig = field(default_factory=HostConfig)
    quant: QuantizationSpec = field(default_factory=QuantizationSpec)
    energy: EnergyCoefficients = field(default_factory=EnergyCoefficients)

    # -- derived quantities -------------------------------------------------
    @property
    def elements_per_page(self) -> int:
        return self.flash.page_size * 8 // self.quant.weight_bits

    @property
    def page_ops(self) -> int:
        """INT ops per page-sized GeMV: one multiply and one add per element."""
        return 2 * self.elements_per_page

    @property
    def core_ops_per_us(self) -> float:
        """Compute-core throughput; default sized to match the array read."""
        if self.host.core_ops_per_us > 0:
            return self.host.core_ops_per_us
        return self.page_ops / self.timing.t_read

    @property
    def compute_time_us(self) -> float:
        return self.page_ops / self.core_ops_per_us

    @property
    def aggregate_core_bw(self) -> float:
        """Steady-state flash GeMV consumption, bytes/us over all cores."""
        return self.flash.total_cores * self.flash.page_size / self.timing.t_read

    # -- time helpers (integer-ns clock) ------------------------------------
    @property
    def t_read_ns(self) -> int:
        return round(self.timing.t_read * 1000)

    @property
    def compute_ns(self) -> int:
        return round(self.compute_time_us * 1000)

    def transfer_ns(self, nbytes: int) -> int:
        return round(nbytes * 1000 / self.timing.bw_channel)


_SCHEMA = {
    "flash": FlashGeometry,
    "timing": FlashTiming,
    "host": HostConfig,
    "quant": QuantizationSpec,
    "energy": EnergyCoefficients,
}

_INT_FIELDS = {
    "channel_num", "chips_per_channel", "dies_per_chip", "planes_per_die",
    "ccores_per_die", "page_size", "spare_size", "block_pages",
    "blocks_per_plane", "channel_rate", "bus_width", "input_output_buffer",
    "weight_bits", "activation_bits",
}


def load_config(text: str) -> SystemConfig:
    """Parse and validate a configuration document.

    Unknown sections or keys are rejected; every validation error names the
    offending key and the violated constraint.
    """
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"parse error: {exc}") from exc

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
    for required in ("flash", "timing"):
        if required not in parser:
            raise ConfigError(f"missing required section [{required}]")

    parts = {}
    for section, cls in _SCHEMA.items():
        known = {f.name for f in fields(cls)}
        kwargs = {}
        if section in parser:
            for key, raw in parser[section].items():
                if key not in known:
                    raise ConfigError(f"unknown key {section}.{key}")
                try:
                    kwargs[key] = int(raw) if key in _INT_FIELDS else float(raw)
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: not a number: {raw!r}") from exc
        for f in fields(cls):
            if f.name not in kwargs and not _has_default(cls, f.name):
                raise ConfigError(f"missing key {section}.{f.name}")
        parts[section] = cls(**kwargs)
    return SystemConfig(**parts)


def _has_default(cls, name: str) -> bool:
    import dataclasses
    f = cls.__dataclass_fields__[name]
    return f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING  # type: ignore[misc]


def dumps_config(cfg: SystemConfig) -> str:
    """Serialize a SystemConfig back into the document format."""
    parser = configparser.ConfigParser()
    for section, obj in (("flash", cfg.flash), ("timing", cfg.timing),
                         ("host", cfg.host), ("quant", cfg.quant),
                         ("energy", cfg.energy)):
        parser[section] = {}
        for f in fields(obj):
            value = getattr(obj, f.name)
            parser[section][f.name] = repr(int(value)) if f.name in _INT_FIELDS else repr(value)
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


# Reference presets: S/M/L differ only in channel and chip counts.
_PRESETS = {
    "S": (8, 2),
    "M": (16, 4),
    "L": (32, 8),
}


def preset(name: str) -> SystemConfig:
    """Return one of the three reference configurations (S, M, L)."""
    key = name.upper()
    if key not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of S, M, L")
    channels, chips = _PRESETS[key]
    return SystemConfig(
        flash=FlashGeometry(
            channel_num=channels,
            chips_per_channel=chips,
            dies_per_chip=2,
            planes_per_die=2,
            ccores_per_die=1,
            page_size=16 * 1024,
            spare_size=1664,
        ),
        timing=FlashTiming(t_read=30.0, channel_rate=1_000_000_000, bus_width=8),
        host=HostConfig(),
        quant=QuantizationSpec(),
        energy=EnergyCoefficients(),
    )
