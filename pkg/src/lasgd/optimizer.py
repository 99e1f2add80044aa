"""Elastic-averaging update rules and the locally asynchronous node state machine.

A node alternates between local SGD steps on its own shard and, whenever its
in-flight all-reduce completes (or its local-step budget tau_max runs out and
it must wait), a finalize that re-anchors the local model at the freshly
averaged center plus the local displacement accumulated since the last
submission.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .collective import CollectiveHandle
from .params import ParamVector, blend, mean_of_vectors, require_same_dim
from .problems import LrSchedule, lr_at


class HyperParamError(ValueError):
    """Inconsistent or out-of-range optimizer hyperparameters."""


@dataclass
class HyperParams:
    """Coupled elastic-averaging knobs.

    alpha is the local pull toward the center (alpha = peak_lr * rho when rho
    is given); beta is the center's pull toward the node average
    (beta = num_nodes * gamma when gamma is given). The asynchronous protocol
    requires the alpha = beta = 1 special case, where finalize reduces to
    "center plus local displacement".
    """

    eta: LrSchedule
    num_nodes: int
    tau_max: int
    alpha: float = 1.0
    beta: float = 1.0
    rho: Optional[float] = None
    gamma: Optional[float] = None

    def validate(self, mode: str = "lasgd") -> None:
        errors = []
        if self.num_nodes < 1:
            errors.append("num_nodes must be >= 1")
        if self.tau_max < 1:
            errors.append("tau_max must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            errors.append(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            errors.append(f"beta must be in [0, 1], got {self.beta}")
        if self.rho is not None:
            if self.rho < 0:
                errors.append("rho must be >= 0")
            else:
                implied = self.eta.peak_lr * self.rho
                if not math.isclose(self.alpha, implied, rel_tol=1e-9, abs_tol=1e-12):
                    errors.append(f"alpha={self.alpha} inconsistent with peak_lr*rho={implied}")
        if self.gamma is not None:
            if self.gamma < 0:
                errors.append("gamma must be >= 0")
            else:
                implied = self.num_nodes * self.gamma
                if not math.isclose(self.beta, implied, rel_tol=1e-9, abs_tol=1e-12):
                    errors.append(f"beta={self.beta} inconsistent with num_nodes*gamma={implied}")
        if mode == "lasgd" and (self.alpha != 1.0 or self.beta != 1.0):
            errors.append("asynchronous mode requires alpha = beta = 1")
        if mode == "easgd" and not 0.0 < self.alpha < 1.0:
            errors.append("round-robin elastic averaging requires 0 < alpha < 1")
        if errors:
            raise HyperParamError("; ".join(errors))


@dataclass
class NodeState:
    """One worker: live local model, last-submitted snapshot, clocks, counters.

    `delta` is bookkept additively as the sum of -eta*g applied since the last
    submission; finalize re-applies exactly this accumulator on top of the
    averaged center.
    """

    rank: int
    x_local: ParamVector
    x_snapshot: ParamVector
    delta: ParamVector
    tau_i: int = 0
    local_clock: int = 0
    global_clock: int = 0
    pending: Optional[CollectiveHandle] = None

    @classmethod
    def fresh(cls, rank: int, x0: ParamVector) -> "NodeState":
        return cls(
            rank=rank,
            x_local=x0,
            x_snapshot=x0,
            delta=ParamVector.zeros(x0.dim),
        )


class TickAction(Enum):
    COMPUTED_STEP = "computed_step"
    FINALIZED = "finalized"
    WAITING_ON_COLLECTIVE = "waiting_on_collective"


def elastic_local_step(
    x: ParamVector, z: ParamVector, g: ParamVector, eta: float, alpha: float
) -> ParamVector:
    """Local elastic update: alpha*z + (1-alpha)*x - eta*g."""
    if not 0.0 <= alpha <= 1.0:
        raise HyperParamError(f"alpha must be in [0, 1], got {alpha}")
    if eta <= 0:
        raise HyperParamError(f"eta must be positive, got {eta}")
    pulled = blend(alpha, z, 1.0 - alpha, x)
    return blend(1.0, pulled, -eta, g)


def elastic_center_step(z: ParamVector, xs: list[ParamVector], beta: float) -> ParamVector:
    """Center update: z + beta * mean_i(x_i - z) == (1-beta)*z + beta*mean(xs)."""
    if not xs:
        raise ValueError("need at least one local model")
    if not 0.0 <= beta <= 1.0:
        raise HyperParamError(f"beta must be in [0, 1], got {beta}")
    for x in xs:
        require_same_dim(z, x)
    return blend(1.0 - beta, z, beta, mean_of_vectors(xs))


def sgd_local_step(state: NodeState, g: ParamVector, eta: float, tau_max: int) -> NodeState:
    """Apply one local SGD step; advances tau_i and the local clock.

    The caller must finalize or wait once tau_i hits tau_max.
    """
    if state.tau_i >= tau_max:
        raise RuntimeError(
            f"node {state.rank} has exhausted its local budget (tau_i={state.tau_i}, tau_max={tau_max})"
        )
    state.x_local = blend(1.0, state.x_local, -eta, g)
    state.delta = blend(1.0, state.delta, -eta, g)
    state.tau_i += 1
    state.local_clock += 1
    return state


def lasgd_finalize_round(
    state: NodeState,
    z: ParamVector,
    num_nodes: int,
    submit: Optional[Callable[[ParamVector], CollectiveHandle]] = None,
) -> NodeState:
    """Re-anchor at the averaged center plus the accumulated local displacement.

    The new model replaces both the live model and the snapshot, the local
    budget resets, and (when a submit callback is given) the new model is
    immediately contributed to the next round's collective.

    num_nodes == 1 short-circuits to the live local model: the center equals
    the snapshot, so center + displacement simplifies exactly and single-node
    runs stay bit-identical to sequential SGD.
    """
    if num_nodes == 1:
        new_model = state.x_local
    else:
        new_model = blend(1.0, z, 1.0, state.delta)
    state.x_local = new_model
    state.x_snapshot = new_model
    state.delta = ParamVector.zeros(new_model.dim)
    state.tau_i = 0
    state.global_clock += 1
    state.pending = submit(new_model) if submit is not None else None
    return state


def lasgd_node_tick(
    state: NodeState,
    grad_fn: Callable[[ParamVector], ParamVector],
    schedule: LrSchedule,
    collective_complete: bool,
    z: Optional[ParamVector],
    tau_max: int,
    num_nodes: int,
    submit: Optional[Callable[[ParamVector], CollectiveHandle]] = None,
) -> TickAction:
    """One iteration of the asynchronous node loop.

    Completion is only acted on here, at step boundaries: finalize if the
    pending collective is done, otherwise take a local step while budget
    remains, otherwise idle until the collective lands.
    """
    if collective_complete:
        if z is None:
            raise ValueError("collective reported complete but no center vector supplied")
        lasgd_finalize_round(state, z, num_nodes, submit=submit)
        return TickAction.FINALIZED
    if state.tau_i < tau_max:
        g = grad_fn(state.x_local)
        eta = lr_at(schedule, state.local_clock)
        sgd_local_step(state, g, eta, tau_max)
        return TickAction.COMPUTED_STEP
    return TickAction.WAITING_ON_COLLECTIVE


class ModelDivergenceError(RuntimeError):
    """Synchronous replicas stopped being bit-identical; indicates nondeterminism."""


def sync_allreduce_sgd_round(
    states: list[NodeState],
    grads: list[ParamVector],
    eta: float,
    transport=None,
    round_id: int = 0,
) -> ParamVector:
    """One synchronous data-parallel round: average gradients, step every replica.

    All replicas must enter with bit-identical models; they leave the same way
    because each applies the identical averaged gradient. Returns the mean
    gradient that was applied.
    """
    if len(states) != len(grads):
        raise ValueError("need one gradient per node")
    reference = states[0].x_local.data
    for st in states[1:]:
        if not np.array_equal(st.x_local.data, reference):
            raise ModelDivergenceError(f"node {st.rank} model differs from node {states[0].rank}")
    from .collective import all_reduce_average  # local import to avoid cycle at module load

    handle = all_reduce_average(grads, transport=transport, round_id=round_id)
    mean_g = handle.result
    for st in states:
        st.x_local = blend(1.0, st.x_local, -eta, mean_g)
        st.x_snapshot = st.x_local
        st.local_clock += 1
        st.global_clock += 1
    return mean_g


def easgd_round_robin_exchange(
    x: ParamVector, z: ParamVector, alpha: float
) -> tuple[ParamVector, ParamVector]:
    """Symmetric elastic pull between one node and the center.

    x' = x - alpha*(x - z), z' = z + alpha*(x - z); the pair sum x + z is
    preserved up to rounding.
    """
    if not 0.0 < alpha < 1.0:
        raise HyperParamError(f"round-robin exchange needs 0 < alpha < 1, got {alpha}")
    require_same_dim(x, z)
    diff = blend(1.0, x, -1.0, z)
    new_x = blend(1.0, x, -alpha, diff)
    new_z = blend(1.0, z, alpha, diff)
    return new_x, new_z
