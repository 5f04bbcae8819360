"""Parameter server that tracks the model difference instead of the model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparsify import SparsifyConfig, layer_mask
from .tensor import (
    LayerPartition,
    NumericOverflowError,
    ParamVector,
    SparseUpdate,
    decode,
    encode,
)


class UnknownWorkerError(KeyError):
    pass


class DuplicateWorkerError(ValueError):
    pass


@dataclass(frozen=True)
class ServerSnapshot:
    M: ParamVector
    t: int
    prev: dict[int, int]
    residual_norms: dict[int, float]


class ParameterServer:
    """Holds M = theta_t - theta_0 and, per worker, everything already sent to it.

    Each upward message ``g`` (already lr-scaled by the worker) is subtracted
    from M; the worker then receives ``G = M - v_k``, top-k compressed when
    ``secondary`` is set, and ``v_k`` advances by exactly what was sent.

    ``momentum > 0`` turns on a server-side velocity over the received
    values (``u = m u + g; M -= u``). That is the classical ASGD momentum
    placement and, fed with sparsified uploads, the broken-momentum baseline.
    """

    def __init__(self, partition: LayerPartition, secondary: SparsifyConfig | None = None,
                 momentum: float = 0.0):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"server momentum must lie in [0, 1), got {momentum}")
        self.partition = partition
        self.secondary = secondary
        self.momentum = momentum
        self._M = np.zeros(partition.total)
        self._u = np.zeros(partition.total) if momentum > 0 else None
        self._v: dict[int, np.ndarray] = {}
        self.prev: dict[int, int] = {}
        self.t = 0

    @property
    def M(self) -> ParamVector:
        return ParamVector(self._M, self.partition)

    def sent_accumulator(self, k: int) -> ParamVector:
        return ParamVector(self._accumulator(k), self.partition)

    def pending(self, k: int) -> ParamVector:
        """Model difference not yet delivered to worker ``k`` (M - v_k)."""
        return ParamVector(self._M - self._accumulator(k), self.partition)

    def _accumulator(self, k: int) -> np.ndarray:
        try:
            return self._v[k]
        except KeyError:
            raise UnknownWorkerError(k) from None

    def register_worker(self, k: int) -> None:
        if k in self._v:
            raise DuplicateWorkerError(f"worker {k} already registered")
        self._v[k] = np.zeros(self.partition.total)
        self.prev[k] = 0

    def on_gradient(self, k: int, g: SparseUpdate) -> tuple[SparseUpdate, int]:
        """Apply one upward update and build the downward delta for worker ``k``.

        Returns ``(G, staleness)`` where staleness counts server updates
        between the worker's last exchange and this one, this one included.
        """
        v = self._accumulator(k)
        if g.nnz and g.indices[-1] >= self.partition.total:
            raise IndexError(f"update index {g.indices[-1]} out of range")

        M = self._M.copy()
        if self._u is None:
            M[g.indices] -= g.values
        else:
            u = self.momentum * self._u
            u[g.indices] += g.values
            M -= u
        if not np.all(np.isfinite(M)):
            raise NumericOverflowError(f"model difference diverged at step {self.t + 1}")
        if self._u is not None:
            self._u = u
        self._M = M

        diff = M - v
        if self.secondary is None:
            sent = diff != 0.0
        else:
            sent = layer_mask(ParamVector._wrap(diff, self.partition), self.secondary)
            sent &= diff != 0.0
        idx = np.flatnonzero(sent)
        # v_k + (M - v_k) at the sent positions, written as the exact result M
        v[idx] = M[idx]

        staleness = self.t + 1 - self.prev[k]
        self.t += 1
        self.prev[k] = self.t
        return SparseUpdate(idx, diff[idx], timestamp=self.t, worker_id=k), staleness

    def on_message(self, data: bytes) -> tuple[bytes, int]:
        """Wire-level entry point: encoded upward update in, encoded delta out."""
        g = decode(data, size=self.partition.total)
        G, staleness = self.on_gradient(g.worker_id, g)
        return encode(G), staleness

    def global_model(self, theta0: ParamVector) -> ParamVector:
        return theta0 + self.M

    def snapshot(self) -> ServerSnapshot:
        return ServerSnapshot(
            M=self.M,
            t=self.t,
            prev=dict(self.prev),
            residual_norms={k: float(np.linalg.norm(self._M - v)) for k, v in self._v.items()},
        )
