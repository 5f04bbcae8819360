"""Worker state machines: compute an upward update, then apply the downward delta."""
from __future__ import annotations

from . import optim
from .optim import Hyperparams
from .sparsify import ConfigError, SparsifyConfig, split_residual
from .tensor import NumericOverflowError, ParamVector, SparseUpdate, apply_sparse, decode, encode, sparse_from_dense

STRATEGIES = ("dense", "residual", "dgc", "samomentum")


class DivergedError(RuntimeError):
    def __init__(self, step: int, msg: str = "non-finite gradient"):
        super().__init__(f"{msg} at local step {step}")
        self.step = step


class Worker:
    """One training worker.

    Strategies:

    ``dense``
        sends lr * grad untouched (ASGD; momentum, if any, lives on the server).
    ``residual``
        gradient dropping: accumulate lr * grad into a residual and send its
        per-layer top-k.
    ``dgc``
        local momentum, residual accumulation of the velocity.
    ``samomentum``
        sparsification-aware momentum, no residual buffer.
    """

    def __init__(self, k: int, theta0: ParamVector, task, strategy: str = "samomentum",
                 hp: Hyperparams | None = None, cfg: SparsifyConfig | None = None):
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        self.k = k
        self.theta = theta0
        self.task = task
        self.strategy = strategy
        self.hp = hp or Hyperparams()
        self.cfg = cfg or SparsifyConfig(0.0)
        self.c = 0
        self.residual: ParamVector | None = None
        self.velocity: optim.VelocityState | None = None
        if strategy in ("residual", "dgc"):
            self.residual = ParamVector.zeros(theta0.partition)
        if strategy in ("dgc", "samomentum"):
            self.velocity = optim.VelocityState.zeros_like(theta0)
        if strategy == "samomentum" and not 0.0 < self.hp.momentum < 1.0:
            raise ConfigError("samomentum needs 0 < momentum < 1")

    def gradient(self, batch) -> ParamVector:
        try:
            grad = self.task.grad(self.theta, batch)
        except NumericOverflowError:
            raise DivergedError(self.c) from None
        return grad

    def compute_step(self, batch, epoch: int = 0) -> SparseUpdate:
        """One local iteration; returns the (lr-scaled) update to send upward."""
        return self.step_with_gradient(self.gradient(batch), epoch)

    def step_with_gradient(self, grad: ParamVector, epoch: int = 0, mask=None) -> SparseUpdate:
        hp = self.hp.at_epoch(epoch)
        try:
            if self.strategy == "dense":
                g = sparse_from_dense(hp.learning_rate * grad)
            elif self.strategy == "residual":
                g, self.residual = split_residual(self.residual + hp.learning_rate * grad, self.cfg, mask)
            elif self.strategy == "dgc":
                self.velocity, self.residual, g = optim.dgc_correction_step(
                    self.velocity, self.residual, grad, hp, self.cfg, mask)
            else:
                self.velocity, g = optim.samomentum_step(self.velocity, grad, hp, self.cfg, mask)
        except NumericOverflowError:
            raise DivergedError(self.c, "non-finite worker state") from None
        self.c += 1
        return g.with_header(timestamp=self.c, worker_id=self.k)

    def apply_downward(self, G: SparseUpdate) -> None:
        """theta += G; the delta already carries sign and learning rate."""
        try:
            self.theta = apply_sparse(self.theta, G, 1.0)
        except NumericOverflowError:
            raise DivergedError(self.c, "non-finite model") from None

    def send(self, batch, epoch: int = 0) -> bytes:
        return encode(self.compute_step(batch, epoch))

    def receive(self, data: bytes) -> None:
        self.apply_downward(decode(data, size=len(self.theta)))
