"""Named hardware and model-geometry presets.

Hardware presets model a current phone SoC: 60 GB/s DRAM, 1 GB/s flash
reads, with DRAM capacity and flash bandwidth variants for sensitivity
studies.  Geometry presets are desk-scale: a few hundred units per layer so
simulations stay fast, with bytes_per_weight scaled so total model bytes
match the checkpoint being modeled (only byte totals enter the timing
model, not the raw dimension counts).
"""

from __future__ import annotations

from .hwsim import HardwareConfig, ModelGeometry

__all__ = ["GB", "HARDWARE_PRESETS", "GEOMETRY_PRESETS"]

GB = 1e9

HARDWARE_PRESETS = {
    # phone-class SoC, 4 GB of DRAM usable for weights
    "phone-4gb": HardwareConfig(dram_capacity_bytes=4 * GB, dram_bandwidth=60 * GB,
                                flash_bandwidth=1 * GB),
    "phone-2gb": HardwareConfig(dram_capacity_bytes=2 * GB, dram_bandwidth=60 * GB,
                                flash_bandwidth=1 * GB),
    "phone-6gb": HardwareConfig(dram_capacity_bytes=6 * GB, dram_bandwidth=60 * GB,
                                flash_bandwidth=1 * GB),
    "phone-4gb-slowflash": HardwareConfig(dram_capacity_bytes=4 * GB,
                                          dram_bandwidth=60 * GB,
                                          flash_bandwidth=0.5 * GB),
    "phone-4gb-fastflash": HardwareConfig(dram_capacity_bytes=4 * GB,
                                          dram_bandwidth=60 * GB,
                                          flash_bandwidth=2 * GB),
}


def _scaled_geometry(num_layers: int, d_model: int, d_ff: int,
                     total_bytes: float, static_bytes: float = 0.0) -> ModelGeometry:
    bpw = total_bytes / (3.0 * d_model * d_ff * num_layers)
    return ModelGeometry(num_layers=num_layers, d_model=d_model, d_ff=d_ff,
                         bytes_per_weight=bpw, static_bytes=static_bytes)


GEOMETRY_PRESETS = {
    # 7.4 GB 4-bit mid-size model; fine-grained units so DRAM flooring loss
    # stays well under 1% of capacity
    "medium-7.4gb": _scaled_geometry(num_layers=4, d_model=128, d_ff=384,
                                     total_bytes=7.4 * GB),
    # small geometry for quick experiments, honest 4-bit byte sizes
    "desk-small": ModelGeometry(num_layers=2, d_model=48, d_ff=144,
                                bytes_per_weight=0.5),
}
