"""Chunked ring all-reduce with nonblocking handles and exact byte accounting.

The collective runs in two phases over a logical ring of P ranks:
reduce-scatter (P-1 steps) after which rank r holds the fully reduced chunk
(r+1) mod P, then all-gather (P-1 steps) which circulates the reduced chunks
to every rank. Each rank sends exactly one chunk per step to its successor.
Division by P happens once per rank after the gather, on identical bits, so
all ranks end with the same mean vector bit for bit.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .params import ChunkSpec, DimensionMismatchError, ParamVector, _check_finite, partition_chunks


class TransportFault(RuntimeError):
    """Injected or detected transport failure; carries a diagnostic cause."""


class CollectiveFailure(RuntimeError):
    """Accessing the result of a failed collective."""


@dataclass(frozen=True)
class RingStep:
    send_chunk: int
    recv_chunk: int
    send_to: int
    recv_from: int
    phase: str  # "reduce" | "gather"


@dataclass(frozen=True)
class RingSchedule:
    """Per-step, per-rank send/receive plan for one ring all-reduce."""

    num_ranks: int
    steps: tuple[tuple[RingStep, ...], ...]

    @property
    def num_steps(self) -> int:
        return len(self.steps)


def ring_schedule(num_ranks: int) -> RingSchedule:
    """Build the 2(P-1)-step ring plan; P=1 yields an empty (local no-op) plan."""
    if num_ranks < 1:
        raise ValueError("num_ranks must be positive")
    P = num_ranks
    steps = []
    for s in range(P - 1):
        steps.append(
            tuple(
                RingStep(
                    send_chunk=(r - s) % P,
                    recv_chunk=(r - s - 1) % P,
                    send_to=(r + 1) % P,
                    recv_from=(r - 1) % P,
                    phase="reduce",
                )
                for r in range(P)
            )
        )
    for k in range(P - 1):
        steps.append(
            tuple(
                RingStep(
                    send_chunk=(r + 1 - k) % P,
                    recv_chunk=(r - k) % P,
                    send_to=(r + 1) % P,
                    recv_from=(r - 1) % P,
                    phase="gather",
                )
                for r in range(P)
            )
        )
    return RingSchedule(num_ranks=P, steps=tuple(steps))


class Status(Enum):
    IN_FLIGHT = "in_flight"
    COMPLETE = "complete"
    FAILED = "failed"


class CollectiveHandle:
    """Nonblocking handle for one in-flight all-reduce round.

    Status transitions are monotonic: IN_FLIGHT -> COMPLETE or IN_FLIGHT ->
    FAILED, exactly once. Safe to poll from any thread.
    """

    def __init__(self, round_id: int):
        self.round_id = round_id
        self._status = Status.IN_FLIGHT
        self._result: ParamVector | None = None
        self._diagnostic: str | None = None
        self.bytes_sent_per_node = 0
        self._event = threading.Event()

    @property
    def status(self) -> Status:
        return self._status

    @property
    def result(self) -> ParamVector:
        if self._status is Status.FAILED:
            raise CollectiveFailure(self._diagnostic or "collective failed")
        if self._status is not Status.COMPLETE:
            raise RuntimeError(f"round {self.round_id} still in flight")
        return self._result

    @property
    def diagnostic(self) -> str | None:
        return self._diagnostic

    def _complete(self, result: ParamVector, bytes_sent_per_node: int) -> None:
        if self._status is not Status.IN_FLIGHT:
            raise RuntimeError("handle already resolved")
        self._result = result
        self.bytes_sent_per_node = bytes_sent_per_node
        self._status = Status.COMPLETE
        self._event.set()

    def _fail(self, diagnostic: str) -> None:
        if self._status is not Status.IN_FLIGHT:
            raise RuntimeError("handle already resolved")
        self._diagnostic = diagnostic
        self._status = Status.FAILED
        self._event.set()

    def wait(self, timeout: float | None = None) -> bool:
        return self._event.wait(timeout)


def poll(handle: CollectiveHandle) -> Status:
    """Non-destructive status read of a handle."""
    return handle.status


@dataclass
class AllReduceOutcome:
    per_rank: list[np.ndarray]  # mean vector per rank, bit-identical by construction
    bytes_sent: list[int]  # exact bytes transmitted by each rank
    peak_step_bytes: int  # largest single-step payload any rank sent


def execute_allreduce(
    vectors: list[np.ndarray],
    chunks: ChunkSpec | None = None,
    schedule: RingSchedule | None = None,
    on_step=None,
) -> AllReduceOutcome:
    """Run the chunked ring mean over per-rank contributions.

    Reduction within each chunk happens in ring-arrival order (the partial sum
    travels around the ring, and each hop adds its own contribution). The
    optional on_step(step_index, payload_bytes_by_rank) callback fires after
    every step and may raise TransportFault to abort.
    """
    P = len(vectors)
    if P == 0:
        raise ValueError("need at least one contribution")
    d = vectors[0].size
    for v in vectors:
        if v.size != d:
            raise DimensionMismatchError(f"contribution dims differ: {v.size} vs {d}")
    if P == 1:
        return AllReduceOutcome(per_rank=[vectors[0]], bytes_sent=[0], peak_step_bytes=0)

    chunks = chunks if chunks is not None else partition_chunks(d, P)
    schedule = schedule if schedule is not None else ring_schedule(P)
    bufs = [np.array(v, dtype=np.float64, copy=True) for v in vectors]
    bytes_sent = [0] * P
    peak = 0

    for step_index, step in enumerate(schedule.steps):
        # Snapshot payloads first: all sends within a step are concurrent.
        payloads = [bufs[entry.recv_from][chunks.slice(entry.recv_chunk)].copy() for entry in step]
        step_bytes = [0] * P
        for r, entry in enumerate(step):
            nbytes = payloads[r].nbytes
            bytes_sent[entry.recv_from] += nbytes
            step_bytes[entry.recv_from] = nbytes
            sl = chunks.slice(entry.recv_chunk)
            if entry.phase == "reduce":
                bufs[r][sl] = payloads[r] + bufs[r][sl]
            else:
                bufs[r][sl] = payloads[r]
        peak = max(peak, max(step_bytes))
        if on_step is not None:
            on_step(step_index, step_bytes)

    results = [buf / P for buf in bufs]
    for res in results:
        _check_finite(res, "all-reduce result")
    return AllReduceOutcome(per_rank=results, bytes_sent=bytes_sent, peak_step_bytes=peak)


def bytes_per_node(d: int, num_ranks: int, bytes_per_element: int, rank: int | None = None) -> int:
    """Exact bytes one rank transmits for one all-reduce.

    Derived by replaying the schedule against the chunk partition. With
    remainder chunks the totals can differ slightly by rank; rank=None returns
    the maximum over ranks. Uniform chunks give 2(P-1)/P * d * bytes_per_element.
    """
    if bytes_per_element < 1:
        raise ValueError("bytes_per_element must be positive")
    P = num_ranks
    if P == 1:
        return 0
    chunks = partition_chunks(d, P)
    schedule = ring_schedule(P)
    totals = [0] * P
    for step in schedule.steps:
        for r, entry in enumerate(step):
            totals[r] += chunks.size(entry.send_chunk) * bytes_per_element
    if rank is None:
        return max(totals)
    return totals[rank]


class LoopbackTransport:
    """In-process transport that executes the ring synchronously at submission.

    Contributions for a round accumulate per rank; once all have arrived the
    collective runs immediately and the shared handle completes (or fails, if
    a fault is injected at some (round, step)). Cumulative per-rank byte
    counters and the peak single-step payload are tracked exactly.
    """

    def __init__(self, num_ranks: int, fault_at: tuple[int, int] | None = None):
        if num_ranks < 1:
            raise ValueError("num_ranks must be positive")
        self.num_ranks = num_ranks
        self.fault_at = fault_at
        self.bytes_sent = [0] * num_ranks
        self.peak_step_bytes = 0
        self._pending: dict[int, list[ParamVector | None]] = {}
        self._handles: dict[int, CollectiveHandle] = {}

    def submit(self, round_id: int, rank: int, contribution: ParamVector) -> CollectiveHandle:
        handle = self._handles.get(round_id)
        if handle is None:
            handle = CollectiveHandle(round_id)
            self._handles[round_id] = handle
            self._pending[round_id] = [None] * self.num_ranks
        slot = self._pending[round_id]
        if slot[rank] is not None:
            raise RuntimeError(f"rank {rank} already contributed to round {round_id}")
        slot[rank] = contribution
        if all(v is not None for v in slot):
            self._run_round(round_id, [v.data for v in slot], handle)
        return handle

    def all_reduce(self, contributions: list[ParamVector], round_id: int = 0) -> CollectiveHandle:
        if len(contributions) != self.num_ranks:
            raise ValueError(f"expected {self.num_ranks} contributions, got {len(contributions)}")
        handle = None
        for rank, vec in enumerate(contributions):
            handle = self.submit(round_id, rank, vec)
        return handle

    def _run_round(self, round_id: int, vectors: list[np.ndarray], handle: CollectiveHandle) -> None:
        def on_step(step_index: int, step_bytes: list[int]) -> None:
            if self.fault_at is not None and self.fault_at == (round_id, step_index):
                raise TransportFault(f"injected fault in round {round_id} at ring step {step_index}")

        try:
            outcome = execute_allreduce(vectors, on_step=on_step)
        except TransportFault as exc:
            handle._fail(str(exc))
            return
        for r in range(self.num_ranks):
            self.bytes_sent[r] += outcome.bytes_sent[r]
        self.peak_step_bytes = max(self.peak_step_bytes, outcome.peak_step_bytes)
        handle._complete(
            ParamVector._wrap(outcome.per_rank[0]),
            bytes_sent_per_node=max(outcome.bytes_sent),
        )
        del self._pending[round_id]


def all_reduce_average(contributions: list[ParamVector], transport=None, round_id: int = 0) -> CollectiveHandle:
    """Submit one contribution per rank; the handle resolves to their mean."""
    if transport is None:
        transport = LoopbackTransport(len(contributions))
    return transport.all_reduce(contributions, round_id=round_id)
