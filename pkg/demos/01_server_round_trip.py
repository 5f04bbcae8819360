"""
One exchange, by hand
=====================

A worker sends a sparse update, the server folds it into the model
difference and answers with whatever that worker has not seen yet.
"""

import numpy as np

from dgs import Hyperparams, ParameterServer, ParamVector, SparsifyConfig, Worker, decode, quadratic_bowl

task = quadratic_bowl(10, seed=0)
theta0 = ParamVector(np.zeros(10))

# two workers keep 20% of their residual per step
server = ParameterServer(theta0.partition)
workers = [Worker(k, theta0, task, "residual", Hyperparams(0.5), SparsifyConfig(80)) for k in range(2)]
for w in workers:
    server.register_worker(w.k)

for step in range(6):
    w = workers[step % 2]
    up = w.send(None)
    down, staleness = server.on_message(up)
    w.receive(down)
    print(f"step {step}: worker {w.k} sent {len(up)} bytes, got {len(down)} bytes, "
          f"{decode(down).nnz} entries, staleness {staleness}")

# after its own exchange a worker holds exactly the global model
gap = workers[1].theta.values - server.global_model(theta0).values
print("worker 1 vs global:", np.abs(gap).max())
print("still pending for worker 0:", np.count_nonzero(server.pending(0).values), "entries")
