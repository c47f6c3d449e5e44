"""Discrete-event simulator and analysis toolkit for a hybrid NPU plus
in-flash-computing architecture running single-batch LLM decode."""

from .hwconfig import (ConfigError, EnergyCoefficients, FlashGeometry,
                       FlashTiming, HostConfig, QuantizationSpec,
                       SystemConfig, dumps_config, load_config, preset)

__all__ = [
    "ConfigError", "EnergyCoefficients", "FlashGeometry", "FlashTiming",
    "HostConfig", "QuantizationSpec", "SystemConfig", "dumps_config",
    "load_config", "preset",
]

__version__ = "0.1.0"
