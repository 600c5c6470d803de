"""Analytical compute/memory cost model for transformer inference requests.

All FLOP and byte counts are exact integers so that sharing ratios derived
from them are reproducible bit-for-bit; times are floats in seconds.

Prefill compute is charged per token position: the token at position ``j``
costs ``2 * P`` GEMM FLOPs plus ``4 * H * L * (2j + 1)`` self-attention FLOPs,
so a full prompt of length ``p`` sums to ``2 P p + 4 H L p**2``.  This makes a
cached prefix of ``k`` tokens worth exactly ``prefill_flops(0, k)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

GIGA = 1_000_000_000


@dataclass(frozen=True)
class ModelConfig:
    param_count: int
    hidden_dim: int
    kv_dim_per_layer: int
    num_layers: int

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.kv_dim_per_layer > self.hidden_dim:
            raise ValueError("kv_dim_per_layer must not exceed hidden_dim")

    @property
    def kv_bytes_per_token(self) -> int:
        # K and V, FP16 each
        return self.kv_dim_per_layer * self.num_layers * 4


@dataclass(frozen=True)
class HardwareConfig:
    peak_compute: float  # GFLOP/s
    peak_bandwidth: float  # GB/s
    kv_memory_capacity: float  # GB

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")

    @property
    def flops_per_second(self) -> float:
        return self.peak_compute * GIGA

    @property
    def bytes_per_second(self) -> float:
        return self.peak_bandwidth * GIGA

    @property
    def kv_capacity_bytes(self) -> float:
        return self.kv_memory_capacity * GIGA


@dataclass(frozen=True)
class RequestCost:
    comp_time: float
    mem_time: float


@dataclass(frozen=True)
class AggregateCost:
    t_comp: float
    t_mem: float
    sharing_ratio: float = 0.0

    def __post_init__(self) -> None:
        if self.t_comp < 0 or self.t_mem < 0:
            raise ValueError("aggregate times must be non-negative")
        if not 0.0 <= self.sharing_ratio <= 1.0:
            raise ValueError(f"sharing ratio {self.sharing_ratio} outside [0, 1]")


def _load_config(cls, path: str | Path | None, default_name: str, overrides: Mapping[str, Any] | None):
    if path is None:
        text = resources.files("blendsched.data").joinpath(default_name).read_text()
    else:
        text = Path(path).read_text()
    values = json.loads(text)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**values)


def load_model_config(path=None, overrides=None) -> ModelConfig:
    """Load a flat-key JSON model config; the bundled default is Llama-3.1-8B."""
    mc = _load_config(ModelConfig, path, "llama31_8b.json", overrides)
    # FLOP counts stay integral
    return ModelConfig(**{k: int(v) for k, v in asdict(mc).items()})


def load_hardware_config(path=None, overrides=None) -> HardwareConfig:
    """Load a flat-key JSON hardware config; the bundled default is A100 80GB SXM."""
    hc = _load_config(HardwareConfig, path, "a100_80gb.json", overrides)
    return HardwareConfig(**{k: float(v) for k, v in asdict(hc).items()})


# -- integer primitives -----------------------------------------------------

def prefill_flops(start: int, end: int, mc: ModelConfig) -> int:
    """FLOPs to prefill token positions ``[start, end)`` given ``start`` cached."""
    return 2 * mc.param_count * (end - start) + 4 * mc.hidden_dim * mc.num_layers * (end * end - start * start)


def comp_flops(p: int, d: int, mc: ModelConfig) -> int:
    return prefill_flops(0, p, mc) + 2 * mc.param_count * d


def decode_flops(d: int, mc: ModelConfig) -> int:
    return 2 * mc.param_count * d


def mem_bytes(p: int, d: int, mc: ModelConfig) -> int:
    """Closed-form KV bytes loaded over ``d`` decode steps: ``(p d + d^2/2) * kv``."""
    return (2 * p * d + d * d) * mc.kv_bytes_per_token // 2


def mem_bytes_exact(p: int, d: int, mc: ModelConfig) -> int:
    """Exact ``sum_{i=1..d} (p + i) * kv`` in closed form."""
    return (p * d + d * (d + 1) // 2) * mc.kv_bytes_per_token


def kv_bytes(p: int, t: int, mc: ModelConfig) -> int:
    """Resident KV-cache bytes for a request with ``p`` prompt and ``t`` generated tokens."""
    if p < 0 or t < 0:
        raise ValueError("token counts must be non-negative")
    return (p + t) * mc.kv_bytes_per_token


# -- times ------------------------------------------------------------------

def comp_time(p: int, d: int, mc: ModelConfig, hc: HardwareConfig) -> float:
    if p < 0 or d < 0:
        raise ValueError("token counts must be non-negative")
    return comp_flops(p, d, mc) / hc.flops_per_second


def mem_time(p: float, d: float, mc: ModelConfig, hc: HardwareConfig) -> float:
    """Closed-form memory-bound time; accepts fractional ``d`` (estimated lengths)."""
    if p < 0 or d < 0:
        raise ValueError("token counts must be non-negative")
    return (p * d + 0.5 * d * d) * mc.kv_bytes_per_token / hc.bytes_per_second


def mem_time_exact(p: int, d: int, mc: ModelConfig, hc: HardwareConfig) -> float:
    if p < 0 or d < 0:
        raise ValueError("token counts must be non-negative")
    return mem_bytes_exact(p, d, mc) / hc.bytes_per_second


def request_cost(p: int, d: int, mc: ModelConfig, hc: HardwareConfig) -> RequestCost:
    return RequestCost(comp_time(p, d, mc, hc), mem_time(p, d, mc, hc))


def density(cost: RequestCost) -> float:
    """Compute density ``comp / mem``; ``inf`` when the request loads no KV."""
    if cost.mem_time == 0:
        return math.inf
    return cost.comp_time / cost.mem_time


def aggregate_density(agg: AggregateCost) -> float:
    if agg.t_mem == 0:
        return math.inf
    return (1.0 - agg.sharing_ratio) * agg.t_comp / agg.t_mem


def optimal_time(agg: AggregateCost) -> float:
    """Lower-bound makespan under perfect overlap: ``max((1-s) T_comp, T_mem)``."""
    return max((1.0 - agg.sharing_ratio) * agg.t_comp, agg.t_mem)


def ratio(num: float, den: float) -> float:
    """``num / den`` with the density convention ``x / 0 = inf`` (``0 / 0 = inf`` too)."""
    return math.inf if den == 0 else num / den
