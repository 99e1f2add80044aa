"""Deterministic gradient oracles, synthetic datasets, and the learning-rate schedule.

Oracles are pure: the same (params, batch) always yields bit-identical
(loss, grad). All randomness is confined to dataset generation and batch
sampling, both driven by explicit seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamVector, NonFiniteError, _check_finite, partition_chunks


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Dataset:
    """n samples with d features each; targets are reals or {0,1} labels."""

    features: np.ndarray
    targets: np.ndarray
    kind: str  # "regression" | "classification"

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.targets.ndim != 1:
            raise ValueError("features must be n x d, targets length n")
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError("features and targets disagree on n")
        self.features.flags.writeable = False
        self.targets.flags.writeable = False

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def shard_of(self, rank: int, num_nodes: int) -> np.ndarray:
        """Sample indices owned by node `rank` out of `num_nodes`.

        Shards are contiguous, disjoint, and cover all n samples.
        """
        if not 0 <= rank < num_nodes:
            raise ValueError(f"rank {rank} out of range for {num_nodes} nodes")
        start, end = partition_chunks(self.n, num_nodes).bounds[rank]
        return np.arange(start, end)

    def to_csv(self, path) -> None:
        """One row per sample: features then target."""
        rows = np.column_stack([self.features, self.targets])
        header = ",".join([f"x{j}" for j in range(self.d)] + ["y"])
        np.savetxt(path, rows, delimiter=",", header=header, comments="")

    @classmethod
    def from_csv(cls, path, kind: str) -> "Dataset":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(features=rows[:, :-1].copy(), targets=rows[:, -1].copy(), kind=kind)


def make_synthetic(seed: int, n: int, d: int, noise: float, kind: str) -> Dataset:
    """Seeded synthetic problem: targets follow a linear/logistic ground-truth model.

    Regression: y = X w* + noise * eps. Classification: labels threshold the
    noisy logits X w* + noise * eps at zero, so noise=0 gives separable data.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    if kind not in ("regression", "classification"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(902,)))
    features = rng.standard_normal((n, d))
    w_true = rng.standard_normal(d)
    eps = rng.standard_normal(n)
    logits = features @ w_true + noise * eps
    if kind == "regression":
        targets = logits
    else:
        targets = (logits > 0.0).astype(np.float64)
    return Dataset(features=features, targets=targets, kind=kind)


class ShardSampler:
    """Without-replacement mini-batches from one node's shard.

    Reshuffles each epoch with a generator derived from (seed, rank), so batch
    order is a pure function of the seed regardless of timing.
    """

    def __init__(self, dataset: Dataset, rank: int, num_nodes: int, batch_size: int, seed: int):
        self.indices = dataset.shard_of(rank, num_nodes)
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.batch_size = min(batch_size, self.indices.size)
        self._rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(rank, 0)))
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if self._pos >= self._order.size:
            self._order = self._rng.permutation(self.indices)
            self._pos = 0
        batch = self._order[self._pos : self._pos + self.batch_size]
        self._pos += batch.size
        return batch


# ---------------------------------------------------------------------------
# gradient oracles


class GradOracle:
    """Evaluator mapping (params, batch index array) -> (loss, grad)."""

    dim: int

    def loss_and_grad(self, x: ParamVector, batch: np.ndarray) -> tuple[float, ParamVector]:
        raise NotImplementedError

    def loss(self, x: ParamVector, batch: np.ndarray) -> float:
        return self.loss_and_grad(x, batch)[0]


def _require_batch(batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("empty batch")
    return batch


class LeastSquaresOracle(GradOracle):
    """Mean squared residual: loss = (1/2m) sum (A_i x - b_i)^2 over the batch."""

    def __init__(self, A: np.ndarray, b: np.ndarray):
        A = np.asarray(A, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.shape[0]:
            raise ValueError("A must be n x d with b of length n")
        self.A = A
        self.b = b
        self.dim = A.shape[1]

    def loss_and_grad(self, x: ParamVector, batch: np.ndarray) -> tuple[float, ParamVector]:
        batch = _require_batch(batch)
        rows = self.A[batch]
        resid = rows @ x.data - self.b[batch]
        m = batch.size
        loss = float(resid @ resid) / (2.0 * m)
        grad = rows.T @ resid / m
        _check_finite(grad, "least-squares gradient")
        if not np.isfinite(loss):
            raise NonFiniteError("least-squares loss is non-finite")
        return loss, ParamVector._wrap(grad)


def least_squares_oracle(A: np.ndarray, b: np.ndarray) -> LeastSquaresOracle:
    return LeastSquaresOracle(A, b)


class LogisticOracle(GradOracle):
    """Mean cross-entropy with sigmoid link over {0,1} labels."""

    def __init__(self, dataset: Dataset):
        labels = np.unique(dataset.targets)
        if not np.isin(labels, (0.0, 1.0)).all():
            raise ValueError("logistic oracle needs binary {0,1} targets")
        self.dataset = dataset
        self.dim = dataset.d

    def loss_and_grad(self, x: ParamVector, batch: np.ndarray) -> tuple[float, ParamVector]:
        batch = _require_batch(batch)
        rows = self.dataset.features[batch]
        y = self.dataset.targets[batch]
        z = rows @ x.data
        # log(1 + e^z) - y*z, computed without overflow
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        p = 1.0 / (1.0 + np.exp(-z))
        grad = rows.T @ (p - y) / batch.size
        _check_finite(grad, "logistic gradient")
        return loss, ParamVector._wrap(grad)


def logistic_oracle(dataset: Dataset) -> LogisticOracle:
    return LogisticOracle(dataset)


class MlpOracle(GradOracle):
    """Fully connected net with tanh hidden units, linear output, squared loss.

    Loss matches the least-squares convention: (1/2m) sum over the batch of the
    squared output error, so a single bias-free linear layer reproduces
    LeastSquaresOracle exactly.

    Parameter layout (defines the flat vector): for each layer l in order,
    weight matrix W_l of shape (n_out, n_in) flattened row-major, then bias b_l
    of length n_out when biases are enabled.
    """

    def __init__(self, layer_dims: list[int], dataset: Dataset, bias: bool = True):
        if len(layer_dims) < 2:
            raise ValueError("need at least input and output dims")
        if layer_dims[0] != dataset.d:
            raise ValueError(f"first layer dim {layer_dims[0]} != dataset feature dim {dataset.d}")
        if layer_dims[-1] != 1:
            raise ValueError("output arity must be 1 for scalar targets")
        self.layer_dims = list(layer_dims)
        self.dataset = dataset
        self.bias = bias
        self.shapes = [(layer_dims[i + 1], layer_dims[i]) for i in range(len(layer_dims) - 1)]
        self.dim = sum(o * i for o, i in self.shapes)
        if bias:
            self.dim += sum(o for o, _ in self.shapes)

    def _unpack(self, x: ParamVector) -> list[tuple[np.ndarray, np.ndarray | None]]:
        if x.dim != self.dim:
            raise ValueError(f"parameter dim {x.dim} != expected {self.dim}")
        layers = []
        off = 0
        for n_out, n_in in self.shapes:
            W = x.data[off : off + n_out * n_in].reshape(n_out, n_in)
            off += n_out * n_in
            b = None
            if self.bias:
                b = x.data[off : off + n_out]
                off += n_out
            layers.append((W, b))
        return layers

    def loss_and_grad(self, x: ParamVector, batch: np.ndarray) -> tuple[float, ParamVector]:
        batch = _require_batch(batch)
        layers = self._unpack(x)
        X = self.dataset.features[batch]
        y = self.dataset.targets[batch]
        m = batch.size

        # forward: tanh between layers, linear output
        activations = [X]
        pre = None
        for idx, (W, b) in enumerate(layers):
            pre = activations[-1] @ W.T
            if b is not None:
                pre = pre + b
            _check_finite(pre, "mlp activations")
            if idx < len(layers) - 1:
                activations.append(np.tanh(pre))
        out = pre[:, 0]

        resid = out - y
        loss = float(resid @ resid) / (2.0 * m)

        # backward
        grad_parts: list[np.ndarray] = []
        delta = (resid / m)[:, None]  # d loss / d pre-activation of output layer
        for idx in range(len(layers) - 1, -1, -1):
            W, b = layers[idx]
            a_in = activations[idx]
            gW = delta.T @ a_in
            parts = [gW.ravel()]
            if b is not None:
                parts.append(delta.sum(axis=0))
            grad_parts.append(np.concatenate(parts))
            if idx > 0:
                # tanh'(z) = 1 - tanh(z)^2, and activations[idx] stores tanh(z)
                delta = (delta @ W) * (1.0 - activations[idx] ** 2)
        grad = np.concatenate(grad_parts[::-1])
        _check_finite(grad, "mlp gradient")
        return loss, ParamVector._wrap(grad)


def mlp_oracle(layer_dims: list[int], dataset: Dataset, bias: bool = True) -> MlpOracle:
    return MlpOracle(layer_dims, dataset, bias=bias)


def finite_diff_check(
    oracle: GradOracle,
    x: ParamVector,
    batch: np.ndarray,
    eps: float = 1e-5,
    max_probes: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between the oracle gradient and central differences.

    Probes every coordinate when dim <= max_probes, otherwise max_probes seeded
    random unit directions. Relative error per probe is
    |fd - g.u| / max(1, |fd|, |g.u|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, grad = oracle.loss_and_grad(x, batch)
    d = x.dim
    if d <= max_probes:
        probes = np.eye(d)
    else:
        rng = np.random.default_rng(seed)
        probes = rng.standard_normal((max_probes, d))
        probes /= np.linalg.norm(probes, axis=1, keepdims=True)
    worst = 0.0
    base = x.data
    for u in probes:
        lp = oracle.loss(ParamVector._wrap(base + eps * u), batch)
        lm = oracle.loss(ParamVector._wrap(base - eps * u), batch)
        fd = (lp - lm) / (2.0 * eps)
        du = float(grad.data @ u)
        err = abs(fd - du) / max(1.0, abs(fd), abs(du))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from base_lr to base_lr * scale_nodes, then step decays.

    The rate at a given step is divided by decay_factor once for every decay
    epoch already reached. Steps convert to epochs via steps_per_epoch.
    """

    base_lr: float
    scale_nodes: int
    warmup_epochs: float
    decay_epochs: tuple[float, ...] = ()
    decay_factor: float = 10.0
    steps_per_epoch: int = 1

    def __post_init__(self) -> None:
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.scale_nodes < 1:
            raise ValueError("scale_nodes must be a positive integer")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be nonnegative")
        if self.decay_factor <= 0:
            raise ValueError("decay_factor must be positive")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive")
        object.__setattr__(self, "decay_epochs", tuple(float(e) for e in self.decay_epochs))

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.scale_nodes


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at a nonnegative step index. Always positive."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    epoch = step / schedule.steps_per_epoch
    peak = schedule.peak_lr
    if schedule.warmup_epochs > 0 and epoch < schedule.warmup_epochs:
        frac = epoch / schedule.warmup_epochs
        return schedule.base_lr + (peak - schedule.base_lr) * frac
    decays = sum(1 for e in schedule.decay_epochs if epoch >= e)
    return peak / schedule.decay_factor**decays
