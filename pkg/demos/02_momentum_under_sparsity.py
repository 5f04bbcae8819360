"""
What momentum does to a held-back component
===========================================

Follow one coordinate that is only sent every T steps.
"""

import math

import numpy as np

from dgs import Hyperparams, ParamVector, SparsifyConfig, VelocityState
from dgs import optim
from dgs.optim import BrokenMomentumState

m, lr, T = 0.7, 0.1, 4
dense = SparsifyConfig(0.0)
hp = Hyperparams(lr, m)
grads = [0.3, -0.1, 0.5, 0.2, 0.4]

# first step is sent, the next T-1 are held, step T is sent again
broken = BrokenMomentumState(ParamVector([0.0]), ParamVector([0.0]))
broken, _ = optim.broken_sparse_momentum_step(broken, ParamVector([grads[0]]), hp, dense, mask=[True])
u_c = broken.u.values[0]
sam = VelocityState(ParamVector([u_c]))
for i in range(1, T + 1):
    send = [i == T]
    broken, _ = optim.broken_sparse_momentum_step(broken, ParamVector([grads[i]]), hp, dense, mask=send)
    sam, g = optim.samomentum_step(sam, ParamVector([grads[i]]), hp, dense, mask=send)

target = m * u_c + lr * math.fsum(grads[1:])
print("momentum step on the whole window:", target)
print("SAMomentum sends:                 ", g.values[0])
print("momentum after sparsification:    ", broken.u.values[0])

# with a fixed send period the sent values follow plain momentum on T-times larger batches
rng = np.random.default_rng(0)
state, ref = VelocityState(ParamVector(np.zeros(3))), np.zeros(3)
for _ in range(5):
    window = rng.standard_normal((T, 3))
    for i in range(T):
        state, g = optim.samomentum_step(state, ParamVector(window[i]), hp, dense, mask=np.full(3, i == T - 1))
    ref = m * ref + T * lr * window.mean(axis=0)
print("largest gap to the enlarged-batch run:", np.abs(g.values - ref).max())
