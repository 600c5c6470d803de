"""Offline batch-inference scheduling: prefix-sharing trees, dual-scanner blending, step simulation."""

from __future__ import annotations

from .cost_model import (
    AggregateCost,
    HardwareConfig,
    ModelConfig,
    RequestCost,
    aggregate_density,
    comp_time,
    density,
    kv_bytes,
    load_hardware_config,
    load_model_config,
    mem_time,
    mem_time_exact,
    optimal_time,
)
from .engine_sim import OverlapModel, SimReport, simulate
from .prefix_tree import Request, SortedTree, TreeNode, build, prepare_tree
from .scheduler import MemoryPartition, SchedConfig, StepBatch, form_steps, partition_memory

__version__ = "0.1.0"

__all__ = [
    "AggregateCost",
    "HardwareConfig",
    "MemoryPartition",
    "ModelConfig",
    "OverlapModel",
    "Request",
    "RequestCost",
    "SchedConfig",
    "SimReport",
    "SortedTree",
    "StepBatch",
    "TreeNode",
    "aggregate_density",
    "build",
    "comp_time",
    "density",
    "form_steps",
    "kv_bytes",
    "load_hardware_config",
    "load_model_config",
    "mem_time",
    "mem_time_exact",
    "optimal_time",
    "partition_memory",
    "prepare_tree",
    "simulate",
]
