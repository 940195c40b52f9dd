"""Scenario files: everything an experiment run needs, in one JSON document.

A scenario pins the cluster shape (containers, capacities, failure rates,
metadata replicas), the workload (object count, sizes, dispersal shape), and
the fault schedule. Runs with the same scenario and seed produce
byte-identical reports.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ScenarioInvalidError
from .cluster import ContainerSpec, DEFAULT_FS_BYTES, DEFAULT_MEM_BYTES, spread_failure_rates


@dataclass
class Workload:
    objects: int = 25
    size_bytes: int | dict = 65536
    n: int | None = None
    k: int | None = None
    target_loss: float | None = None
    shapes: list[tuple[int, int]] = field(default_factory=list)  # overhead sweeps

    def sample_size(self, rng: random.Random) -> int:
        if isinstance(self.size_bytes, int):
            return self.size_bytes
        low = int(self.size_bytes["min"])
        high = int(self.size_bytes["max"])
        if self.size_bytes.get("distribution", "uniform") == "log_uniform":
            return max(1, round(math.exp(rng.uniform(math.log(low), math.log(high)))))
        return rng.randint(low, high)

    def max_size(self) -> int:
        if isinstance(self.size_bytes, int):
            return self.size_bytes
        return int(self.size_bytes["max"])


@dataclass
class FaultPlan:
    max_down: int = 0
    exhaustive_cap: int = 300  # enumerate C(N, f) subsets up to this many
    samples: int = 40  # otherwise, this many seeded random subsets


@dataclass
class Scenario:
    name: str
    seed: int
    containers: list[ContainerSpec]
    metadata_replicas: int = 1
    workload: Workload = field(default_factory=Workload)
    faults: FaultPlan = field(default_factory=FaultPlan)
    retention_days: int = 30
    pending_ttl_ms: int = 3000

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        try:
            return _parse(raw)
        except ScenarioInvalidError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioInvalidError(f"bad scenario: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ScenarioInvalidError(f"cannot read scenario {path}: {exc}") from exc
        return cls.from_dict(raw)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ScenarioInvalidError(message)


def _parse(raw: dict) -> Scenario:
    _require(isinstance(raw, dict), "scenario must be a JSON object")
    _require("name" in raw, "scenario needs a name")
    name = str(raw["name"])
    seed = int(raw.get("seed", 0))

    containers_raw = raw.get("containers", 10)
    defaults = raw.get("container_defaults", {})
    base = ContainerSpec.from_dict(defaults) if defaults else ContainerSpec()
    if isinstance(containers_raw, int):
        _require(containers_raw >= 1, "need at least one container")
        rates_raw = raw.get("failure_rates")
        if isinstance(rates_raw, list):
            _require(
                len(rates_raw) == containers_raw,
                f"failure_rates has {len(rates_raw)} entries for "
                f"{containers_raw} containers",
            )
            rates = [float(r) for r in rates_raw]
        elif isinstance(rates_raw, dict):
            rates = spread_failure_rates(
                containers_raw,
                float(rates_raw.get("low", 0.01)),
                float(rates_raw.get("high", 0.25)),
            )
        else:
            rates = [base.annual_failure_rate] * containers_raw
        containers = [
            ContainerSpec(
                fs_capacity_bytes=base.fs_capacity_bytes,
                mem_budget_bytes=base.mem_budget_bytes,
                annual_failure_rate=r,
            )
            for r in rates
        ]
    else:
        _require(isinstance(containers_raw, list) and containers_raw,
                 "containers must be a count or a non-empty list")
        containers = [ContainerSpec.from_dict(c) for c in containers_raw]
    for spec in containers:
        _require(spec.fs_capacity_bytes > 0, "container fs capacity must be positive")
        _require(0.0 <= spec.annual_failure_rate <= 1.0,
                 "annual failure rate must be within [0, 1]")

    metadata_replicas = int(raw.get("metadata_replicas", 1))
    _require(metadata_replicas >= 1, "need at least one metadata replica")

    w = raw.get("workload", {})
    workload = Workload(
        objects=int(w.get("objects", 25)),
        size_bytes=w.get("size_bytes", 65536),
        n=int(w["n"]) if "n" in w else None,
        k=int(w["k"]) if "k" in w else None,
        target_loss=float(w["target_loss"]) if "target_loss" in w else None,
        shapes=[(int(n), int(k)) for n, k in w.get("shapes", [])],
    )
    _require(workload.objects >= 1, "workload needs at least one object")
    if isinstance(workload.size_bytes, dict):
        _require(
            0 < int(workload.size_bytes["min"]) <= int(workload.size_bytes["max"]),
            "size range must satisfy 0 < min <= max",
        )
    else:
        _require(int(workload.size_bytes) >= 0, "size_bytes must be non-negative")
    if (workload.n is None) != (workload.k is None):
        raise ScenarioInvalidError("workload must give both n and k, or neither")
    if workload.n is not None:
        _require(1 <= workload.k <= workload.n <= 255,
                 f"invalid dispersal shape ({workload.n}, {workload.k})")
        _require(workload.n <= len(containers),
                 f"n={workload.n} needs at least that many containers")
    for n, k in workload.shapes:
        _require(1 <= k <= n <= len(containers),
                 f"invalid sweep shape ({n}, {k}) for {len(containers)} containers")

    f = raw.get("faults", {})
    faults = FaultPlan(
        max_down=int(f.get("max_down", 0)),
        exhaustive_cap=int(f.get("exhaustive_cap", 300)),
        samples=int(f.get("samples", 40)),
    )
    _require(0 <= faults.max_down <= len(containers),
             "faults.max_down cannot exceed the container count")
    _require(faults.exhaustive_cap >= 1 and faults.samples >= 1,
             "fault enumeration bounds must be positive")

    return Scenario(
        name=name,
        seed=seed,
        containers=containers,
        metadata_replicas=metadata_replicas,
        workload=workload,
        faults=faults,
        retention_days=int(raw.get("retention_days", 30)),
        pending_ttl_ms=int(raw.get("pending_ttl_ms", 3000)),
    )


# Ready-made scenarios the CLI falls back to when no file is given. The
# retention geometry matches the headline experiment: ten heterogeneous
# containers with yearly failure rates from 1% to 25%.
BUILTIN: dict[str, dict] = {
    "retention": {
        "name": "retention",
        "seed": 7,
        "containers": 10,
        "failure_rates": {"low": 0.01, "high": 0.25},
        "workload": {"objects": 25, "size_bytes": 65536, "target_loss": 0.001},
        "faults": {"max_down": 6, "exhaustive_cap": 300, "samples": 40},
    },
    "fairness": {
        "name": "fairness",
        "seed": 11,
        "containers": 10,
        "workload": {"objects": 1000, "size_bytes": 8192},
    },
    "overhead": {
        "name": "overhead",
        "seed": 3,
        "containers": 12,
        "workload": {
            "objects": 12,
            "size_bytes": {"min": 65536, "max": 1048576,
                           "distribution": "log_uniform"},
            "shapes": [[1, 1], [3, 2], [6, 4], [10, 5], [12, 8]],
        },
    },
}


def builtin(name: str) -> Scenario:
    if name not in BUILTIN:
        raise ScenarioInvalidError(
            f"no builtin scenario {name!r}; have {sorted(BUILTIN)}"
        )
    return Scenario.from_dict(BUILTIN[name])
