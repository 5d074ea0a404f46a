"""Deterministic simulator of paravirtual page-table management.

Layers, bottom up: ``frame_table`` (packed type words), ``iommu`` (DMA
permissions and IOTLB), ``type_guard`` (hypervisor-side transitions),
``guest_alloc`` (buddy allocator), ``pt_cache`` (per-level semi-writable
frame cache), ``workload`` (processes and events) and ``harness``.
"""

from ptsim.harness import RunConfig, RunResult, Scenario, parse_config, run_scenario

__all__ = ["RunConfig", "RunResult", "Scenario", "parse_config", "run_scenario"]
__version__ = "0.1.0"
