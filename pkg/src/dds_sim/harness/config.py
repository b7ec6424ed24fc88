"""Scenario configuration: YAML files validated against pydantic models."""
from __future__ import annotations

import copy
import json
import re
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from dds_sim.errors import DDSError, Status
from dds_sim.wire import parse_signature


class _Loader(yaml.SafeLoader):
    """Safe loader where only true/false are booleans, so ``mode: off`` stays a string."""


_Loader.yaml_implicit_resolvers = {
    ch: [(tag, rx) for tag, rx in rs if tag != "tag:yaml.org,2002:bool"]
    for ch, rs in yaml.SafeLoader.yaml_implicit_resolvers.items()
}
_Loader.add_implicit_resolver("tag:yaml.org,2002:bool", re.compile(r"^(?:true|True|TRUE|false|False|FALSE)$"),
                              list("tTfF"))


def _load(text: str):
    return yaml.load(text, Loader=_Loader)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WorkloadSpec(_Strict):
    io_size: int = Field(1024, ge=64, description="bytes per KV record or page")
    read_fraction: float = Field(0.7, ge=0.0, le=1.0)
    requests_per_message: int = Field(1, ge=1)
    outstanding_messages: int = Field(1, ge=1)
    connections: int = Field(1, ge=1)
    total_ops: int = Field(1000, ge=0)
    keys: int = Field(1024, ge=1, description="key space (kv_log) or page count (page_lsn)")
    preload: bool = Field(True, description="write every key/page through the host path first")
    key_skew: float = Field(0.0, ge=0.0, description="0 = uniform; >0 = Zipf exponent")


class DirectorSpec(_Strict):
    signatures: list[str] = Field(default_factory=lambda: ["[* : *, 10.10.1.1 : 1111, TCP]"])
    cores: int = Field(4, ge=1)
    mtu: int = Field(1500, ge=64)
    inspect_cost: float = Field(2.0, ge=0.0, description="simulated µs per inspected packet")
    passthrough: bool = False
    isn: int = Field(100, ge=0, description="client initial sequence number")

    @field_validator("signatures")
    @classmethod
    def _parse(cls, v: list[str]) -> list[str]:
        for s in v:
            parse_signature(s)
        return v


class NetworkSpec(_Strict):
    link_latency: float = Field(5.0, ge=0.0)
    host_link_latency: float = Field(1.0, ge=0.0)
    loss: float = Field(0.0, ge=0.0, lt=1.0)
    rto: float = Field(1000.0, gt=0.0)


class DpuSpec(_Strict):
    ring_capacity: int = Field(4 << 20, description="bytes, power of two")
    max_progress: Optional[int] = Field(None, description="M in bytes; default capacity/4")
    dma_latency: float = Field(1.0, ge=0.0)
    dma_per_byte: float = Field(0.01 / 64, ge=0.0)
    device_capacity: int = Field(256 << 20, ge=1 << 20)
    segment_size: int = Field(1 << 20, ge=512)
    device_latency: tuple[float, float] = (10.0, 10.0)
    batch_threshold: int = Field(1, ge=1, description="bytes buffered before a response DMA")
    flush_deadline: float = Field(50.0, ge=0.0)
    context_ring: int = Field(256, ge=1)
    table_capacity: int = Field(1 << 16, ge=1)
    pool_per_class: int = Field(512, ge=1)
    copy_mode: bool = Field(False, description="copying baseline instead of zero-copy")

    @field_validator("ring_capacity")
    @classmethod
    def _pow2(cls, v: int) -> int:
        if v < 64 or v & (v - 1):
            raise ValueError("must be a power of two >= 64")
        return v

    @model_validator(mode="after")
    def _geometry(self) -> "DpuSpec":
        if self.device_capacity % self.segment_size:
            raise ValueError("device_capacity must be a multiple of segment_size")
        lo, hi = self.device_latency
        if not 0 <= lo <= hi:
            raise ValueError("device_latency must be (lo, hi) with 0 <= lo <= hi")
        return self


class HostSpec(_Strict):
    request_cost: float = Field(1.0, ge=0.0, description="simulated µs per request")
    completion_cost: float = Field(0.5, ge=0.0, description="simulated µs per file completion")
    baseline_request_cost: float = Field(4.0, ge=0.0, description="per request without the file library")
    baseline_latency: float = Field(20.0, ge=0.0, description="µs per I/O without the file library")
    page_cache: int = Field(64, ge=1)


class RingBenchSpec(_Strict):
    producers: list[int] = Field(default_factory=lambda: [1, 4, 16, 32, 64])
    kinds: list[Literal["progress", "farm", "locked"]] = Field(
        default_factory=lambda: ["progress", "locked", "farm"])
    duration: float = Field(1.0, gt=0.0, description="wall seconds per point")
    message_size: int = Field(8, ge=1)
    capacity: int = Field(1 << 20)
    dma_ns: int = Field(2000, ge=0, description="real stall per DMA operation")


class TableBenchSpec(_Strict):
    items: int = Field(200_000, ge=1)
    capacity: Optional[int] = None
    readers: list[int] = Field(default_factory=lambda: [1, 2, 4, 8])
    duration: float = Field(1.0, gt=0.0)
    load_factor: float = Field(0.8, gt=0.0, le=1.0)


class ScenarioConfig(_Strict):
    name: str = "scenario"
    kind: Literal["simulation", "bench_ring", "bench_table"] = "simulation"
    seed: int = 0
    mode: Literal["off", "library_only", "full_offload"] = "full_offload"
    plugin: Literal["kv_log", "page_lsn", "host_only"] = "kv_log"
    workload: WorkloadSpec = Field(default_factory=WorkloadSpec)
    director: DirectorSpec = Field(default_factory=DirectorSpec)
    network: NetworkSpec = Field(default_factory=NetworkSpec)
    dpu: DpuSpec = Field(default_factory=DpuSpec)
    host: HostSpec = Field(default_factory=HostSpec)
    literal_preamble: bool = Field(False, description="open connection 0 with the 100/132/1032/1064 message sequence")
    trace_transport: bool = Field(False, description="trace every segment")
    record_routes: bool = Field(False, description="log per-request routing and payload digests")
    ring_bench: RingBenchSpec = Field(default_factory=RingBenchSpec)
    table_bench: TableBenchSpec = Field(default_factory=TableBenchSpec)


def config_schema() -> dict:
    return ScenarioConfig.model_json_schema()


def _set_path(data: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    cur = data
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise DDSError(Status.CONFIG_INVALID, f"{dotted}: {k} is not a section")
    cur[keys[-1]] = value


def parse_config(data: dict, overrides: Optional[list[str]] = None) -> ScenarioConfig:
    data = copy.deepcopy(data or {})
    for item in overrides or []:
        if "=" not in item:
            raise DDSError(Status.CONFIG_INVALID, f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        _set_path(data, k.strip(), _load(v))
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        lines = [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()]
        raise DDSError(Status.CONFIG_INVALID, "; ".join(lines)) from None


def load_config(path, overrides: Optional[list[str]] = None) -> ScenarioConfig:
    try:
        data = _load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise DDSError(Status.CONFIG_INVALID, f"{path}: {e}") from None
    if not isinstance(data, dict):
        raise DDSError(Status.CONFIG_INVALID, f"{path}: top level must be a mapping")
    return parse_config(data, overrides)


def schema_text() -> str:
    return json.dumps(config_schema(), indent=2)
