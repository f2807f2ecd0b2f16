#!/usr/bin/env python3
"""Dense-baseline decode throughput across the bundled hardware presets.

Prints a plot-ready table of cold-start and steady-state tokens/second for a
model that does not fit in DRAM, so part of every token's weights must stream
from flash.
"""
import argparse

from sparsim import (
    GEOMETRY_PRESETS,
    HARDWARE_PRESETS,
    SchemeConfig,
    SyntheticTraceSpec,
    generate_synthetic_trace,
    simulate_run,
)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--geometry", default="medium-7.4gb",
                        choices=sorted(GEOMETRY_PRESETS))
    parser.add_argument("--tokens", type=int, default=4)
    args = parser.parse_args()

    geo = GEOMETRY_PRESETS[args.geometry]
    trace = generate_synthetic_trace(SyntheticTraceSpec(
        num_tokens=args.tokens, num_layers=geo.num_layers,
        d_model=geo.d_model, d_ff=geo.d_ff, seed=0))

    print(f"geometry {args.geometry}: {geo.total_bytes / 1e9:.2f} GB, "
          f"{geo.num_layers} layers")
    header = f"{'preset':22s} {'dram_gb':>8s} {'flash_gbps':>10s} " \
             f"{'cold_tok_s':>10s} {'steady_tok_s':>12s}"
    print(header)
    print("-" * len(header))
    for name in sorted(HARDWARE_PRESETS):
        hw = HARDWARE_PRESETS[name]
        report = simulate_run(trace, None, SchemeConfig(name="dense"), "lfu",
                              hw, geo)
        print(f"{name:22s} {hw.dram_capacity_bytes / 1e9:8.1f} "
              f"{hw.flash_bandwidth / 1e9:10.1f} "
              f"{report.throughput:10.3f} {report.steady_state_throughput:12.3f}")


if __name__ == "__main__":
    main()
