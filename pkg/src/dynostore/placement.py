"""Capacity-aware container selection and resilience planning.

Selection scores each container by its *post-placement* used fraction of
memory and filesystem, weighted and argmin'd; only filesystem space is a hard
feasibility bound. The planner enumerates (n, k) dispersal shapes against the
targets' annual failure rates (independent-failure model, Poisson binomial)
and returns the cheapest shape whose yearly object-loss probability meets the
target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .domain import ContainerState
from .errors import (
    InsufficientCapacityError,
    InvalidParamsError,
    NoFeasibleContainerError,
    NotEnoughContainersError,
)


@dataclass(frozen=True)
class UtilizationWeights:
    """Relative importance of memory vs filesystem pressure when placing."""

    memory: float = 0.5
    filesystem: float = 0.5

    def __post_init__(self) -> None:
        if self.memory < 0 or self.filesystem < 0:
            raise InvalidParamsError("utilization weights must be non-negative")
        if self.memory + self.filesystem <= 0:
            raise InvalidParamsError("at least one utilization weight must be positive")


DEFAULT_WEIGHTS = UtilizationWeights()


def _used_fraction(total: int, available: int, size: int) -> float:
    if total <= 0:
        return 1.0
    frac = (total - (available - size)) / total
    return min(1.0, max(0.0, frac))


def utilization(state: ContainerState, object_size: int) -> tuple[float, float]:
    """Post-placement used fractions (memory, filesystem), each clamped to [0,1].

    Raises InsufficientCapacityError when the object cannot fit on disk at all.
    """
    if object_size < 0:
        raise InvalidParamsError("negative object size")
    if object_size > state.fs_available_bytes:
        raise InsufficientCapacityError(
            f"{object_size} bytes exceed free space on {state.container_id}"
        )
    u_mem = _used_fraction(state.mem_total_bytes, state.mem_available_bytes, object_size)
    u_fs = _used_fraction(state.fs_total_bytes, state.fs_available_bytes, object_size)
    return u_mem, u_fs


def weighted_utilization(
    state: ContainerState, object_size: int, weights: UtilizationWeights = DEFAULT_WEIGHTS
) -> float:
    u_mem, u_fs = utilization(state, object_size)
    return weights.memory * u_mem + weights.filesystem * u_fs


def select_container(
    containers: Sequence[ContainerState],
    object_size: int,
    weights: UtilizationWeights = DEFAULT_WEIGHTS,
) -> str:
    """Pick the feasible healthy container with the lowest weighted utilization.

    Ties break on the lexicographically smallest container id, which keeps
    selection deterministic for identical snapshots.
    """
    best: tuple[float, str] | None = None
    for state in containers:
        if not state.healthy or object_size > state.fs_available_bytes:
            continue
        score = weighted_utilization(state, object_size, weights)
        key = (score, state.container_id)
        if best is None or key < best:
            best = key
    if best is None:
        raise NoFeasibleContainerError(
            f"no healthy container can hold {object_size} bytes"
        )
    return best[1]


def select_n_containers(
    containers: Sequence[ContainerState],
    n: int,
    object_size: int,
    weights: UtilizationWeights = DEFAULT_WEIGHTS,
    k: int | None = None,
) -> list[str]:
    """Pick n distinct containers for an object's chunks, fullest picked last.

    Each pick is charged one chunk -- ceil(size/k) bytes when k is known,
    ceil(size/n) otherwise -- against the working snapshot before the next
    argmin, so a draining container soaks up at most its fair share.
    """
    if n < 1:
        raise InvalidParamsError(f"need at least one container, got n={n}")
    divisor = k if k is not None else n
    if divisor < 1 or divisor > n:
        raise InvalidParamsError(f"bad k={k} for n={n}")
    chunk = math.ceil(object_size / divisor) if object_size else 0
    pool = {c.container_id: c for c in containers}
    picks: list[str] = []
    for _ in range(n):
        remaining = [c for cid, c in pool.items() if cid not in picks]
        try:
            chosen = select_container(remaining, chunk, weights)
        except NoFeasibleContainerError:
            raise NotEnoughContainersError("Not enough containers available.") from None
        picks.append(chosen)
        pool[chosen] = pool[chosen].charged(chunk)
    return picks


def loss_probability(rates: Sequence[float], k: int) -> float:
    """P[object lost within a year] = P[more than n-k of its holders fail].

    ``rates`` are the annual failure probabilities of the n chunk holders,
    assumed independent (Poisson binomial tail past the parity budget).
    """
    n = len(rates)
    if n == 0:
        raise InvalidParamsError("no failure rates given")
    if not (1 <= k <= n):
        raise InvalidParamsError(f"bad k={k} for {n} holders")
    for r in rates:
        if not (0.0 <= r <= 1.0):
            raise InvalidParamsError(f"failure rate out of [0,1]: {r}")
    dist = _failure_distribution(rates)
    return float(sum(dist[n - k + 1 :]))


def _failure_distribution(rates: Sequence[float]) -> list[float]:
    """dist[j] = P[exactly j of the holders fail]."""
    dist = [1.0]
    for p in rates:
        nxt = [0.0] * (len(dist) + 1)
        for j, q in enumerate(dist):
            nxt[j] += q * (1.0 - p)
            nxt[j + 1] += q * p
        dist = nxt
    return dist


@dataclass(frozen=True)
class ResiliencePlan:
    """A chosen dispersal shape plus its predicted yearly loss probability."""

    n: int
    k: int
    targets: tuple[str, ...]
    loss_probability: float
    target_loss: float
    feasible: bool

    def __post_init__(self) -> None:
        if self.feasible and self.loss_probability > self.target_loss:
            raise InvalidParamsError("feasible plan must meet its loss target")

    @property
    def tolerance(self) -> int:
        """Container failures the object survives outright."""
        return self.n - self.k

    @property
    def overhead(self) -> float:
        """Stored-bytes multiplier relative to the raw object."""
        return self.n / self.k

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "k": self.k,
            "targets": list(self.targets),
            "loss_probability": self.loss_probability,
            "target_loss": self.target_loss,
            "feasible": self.feasible,
            "tolerance": self.tolerance,
            "overhead": self.overhead,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ResiliencePlan":
        return cls(
            n=raw["n"],
            k=raw["k"],
            targets=tuple(raw["targets"]),
            loss_probability=raw["loss_probability"],
            target_loss=raw["target_loss"],
            feasible=raw["feasible"],
        )


def plan_resilience(
    containers: Sequence[ContainerState],
    object_size: int,
    target_loss: float,
    weights: UtilizationWeights = DEFAULT_WEIGHTS,
) -> ResiliencePlan:
    """Cheapest (n, k) meeting the loss target on the best available targets.

    Preference order: minimal storage overhead n/k, then larger tolerance
    n-k, then smaller n. When even the most redundant shape misses the
    target, the minimum-loss shape is returned flagged infeasible.
    """
    if not (0.0 < target_loss < 1.0):
        raise InvalidParamsError(f"target loss must be in (0,1), got {target_loss}")
    candidates: list[tuple[Fraction, int, int, tuple[str, ...], float]] = []
    by_id = {c.container_id: c for c in containers}
    n = 1
    while n <= len(containers):
        try:
            targets = select_n_containers(containers, n, object_size, weights)
        except NotEnoughContainersError:
            break
        rates = [by_id[cid].annual_failure_rate for cid in targets]
        dist = _failure_distribution(rates)
        # tail[j] = P[more than j holders fail]; one pass serves every k.
        tail = [0.0] * (n + 1)
        acc = 0.0
        for j in range(n, 0, -1):
            acc += dist[j]
            tail[j - 1] = acc
        for k in range(1, n + 1):
            loss = tail[n - k]
            candidates.append((Fraction(n, k), n, k, tuple(targets), loss))
        n += 1
    if not candidates:
        raise NoFeasibleContainerError(
            f"no container can hold {object_size} bytes at all"
        )
    feasible = [c for c in candidates if c[4] <= target_loss]
    if feasible:
        overhead, n, k, targets, loss = min(
            feasible, key=lambda c: (c[0], -(c[1] - c[2]), c[1])
        )
        return ResiliencePlan(n, k, targets, loss, target_loss, True)
    overhead, n, k, targets, loss = min(
        candidates, key=lambda c: (c[4], c[0], -(c[1] - c[2]), c[1])
    )
    return ResiliencePlan(n, k, targets, loss, target_loss, False)
