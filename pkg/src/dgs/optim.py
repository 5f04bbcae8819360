"""Update rules as pure state transitions.

Every rule takes the raw gradient and returns the quantity a worker would
put on the wire, already scaled by the learning rate, so the server never
needs to know which optimizer produced it.
"""
from __future__ import annotations

from dataclasses import dataclass

from .sparsify import ConfigError, SparsifyConfig, split_residual, split_samomentum
from .tensor import ParamVector, apply_sparse


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.1
    momentum: float = 0.0
    # (epoch, factor) pairs; factor multiplies the rate from that epoch on
    lr_schedule: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        sched = tuple((int(e), float(f)) for e, f in self.lr_schedule)
        epochs = [e for e, _ in sched]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigError(f"lr_schedule epochs must be strictly increasing: {epochs}")
        object.__setattr__(self, "lr_schedule", sched)

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for e, factor in self.lr_schedule:
            if epoch >= e:
                lr *= factor
        return lr

    def at_epoch(self, epoch: int) -> "Hyperparams":
        """Copy with the schedule folded into ``learning_rate``."""
        return Hyperparams(self.lr_at(epoch), self.momentum)


@dataclass(frozen=True)
class VelocityState:
    u: ParamVector
    c: int = 0

    @classmethod
    def zeros_like(cls, vec: ParamVector) -> "VelocityState":
        return cls(ParamVector.zeros(vec.partition))


@dataclass(frozen=True)
class BrokenMomentumState:
    """Worker residual plus the velocity built only from values already sent."""

    u: ParamVector
    residual: ParamVector
    c: int = 0

    @classmethod
    def zeros_like(cls, vec: ParamVector) -> "BrokenMomentumState":
        z = ParamVector.zeros(vec.partition)
        return cls(z, z)


def sgd_step(theta: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    return theta - lr * grad


def momentum_step(state: VelocityState, grad: ParamVector, hp: Hyperparams):
    """u' = m u + lr * grad. Returns ``(state', u')``; caller applies theta -= u'."""
    u = hp.momentum * state.u + hp.learning_rate * grad
    return VelocityState(u, state.c + 1), u


def broken_sparse_momentum_step(state: BrokenMomentumState, grad: ParamVector, hp: Hyperparams,
                                cfg: SparsifyConfig, mask=None):
    """Momentum applied after sparsification.

    The residual collects lr * grad and only its top-k part is sent; the
    velocity then sees nothing but the sent values, u' = m u + g, so the
    held-back gradient misses the momentum discounting it would otherwise
    get. Returns ``(state', g)``; the applied update is ``state'.u``.
    """
    acc = state.residual + hp.learning_rate * grad
    g, residual = split_residual(acc, cfg, mask)
    u = apply_sparse(hp.momentum * state.u, g, 1.0)
    return BrokenMomentumState(u, residual, state.c + 1), g


def dgc_correction_step(state: VelocityState, residual: ParamVector, grad: ParamVector,
                        hp: Hyperparams, cfg: SparsifyConfig, mask=None):
    """Local momentum, then residual accumulation of the velocity (momentum correction).

    Returns ``(state', residual', g)``.
    """
    u = hp.momentum * state.u + hp.learning_rate * grad
    g, residual = split_residual(residual + u, cfg, mask)
    return VelocityState(u, state.c + 1), residual, g


def samomentum_step(state: VelocityState, grad: ParamVector, hp: Hyperparams,
                    cfg: SparsifyConfig, mask=None):
    """Sparsification-aware momentum.

    u_tmp = m u + lr * grad; the top-k part of u_tmp is sent and kept in the
    velocity as is, every unsent component is divided by m. No residual
    buffer: the rescaled velocity carries the unsent mass forward.
    """
    if not 0.0 < hp.momentum < 1.0:
        raise ConfigError(f"SAMomentum needs 0 < m < 1, got {hp.momentum}")
    u_tmp = hp.momentum * state.u + hp.learning_rate * grad
    g, u = split_samomentum(u_tmp, cfg, hp.momentum, mask)
    return VelocityState(u, state.c + 1), g
