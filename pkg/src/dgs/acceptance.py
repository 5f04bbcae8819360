"""Acceptance checks: protocol invariants, oracle replays and desk-scale runs.

Each ``check_*`` returns a :class:`CheckResult`; ``run_all`` prints one
PASS/FAIL line per check.
"""
from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import optim
from .bench import ExperimentConfig, gradcheck_report, run_experiment
from .optim import BrokenMomentumState, Hyperparams, VelocityState
from .sim import ARRIVE_SERVER, ARRIVE_WORKER, COMPUTE_DONE, DelayModel, SimConfig, Simulation, run, summarize
from .sparsify import SparsifyConfig
from .tasks import logistic_task, quadratic_bowl
from .tensor import ParamVector, SparseUpdate, decode, encode, encoded_size, dense_encoded_size

DENSE = SparsifyConfig(0.0)


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} [{self.number}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(number: int, name: str, fn, budget: float | None = None) -> CheckResult:
    start = time.perf_counter()
    passed, detail = fn()
    secs = time.perf_counter() - start
    if budget is not None and secs >= budget:
        passed, detail = False, f"{detail}; runtime {secs:.2f}s over {budget}s budget"
    return CheckResult(number, name, bool(passed), detail, secs)


def _logistic_cfg(workers: int, exchanges: int, drop_ratio: float, seed: int = 0, **kw) -> SimConfig:
    task = logistic_task(20, 400, separation=2.0, seed=seed)
    base = dict(workers=workers, strategy="residual", hp=Hyperparams(0.1), sparsify=SparsifyConfig(drop_ratio),
                batch_size=16, max_exchanges=exchanges, compute=DelayModel("exponential", 10.0),
                seed=seed, record_trace=True)
    base.update(kw)
    return SimConfig(task, **base)


# -- 1: R=0 equals dense asynchronous SGD --------------------------------------------------

def dense_asgd_replay(task, theta0: np.ndarray, lr: float, trace) -> dict[int, list[np.ndarray]]:
    """Plain dense ASGD driven by a recorded event schedule.

    Workers compute at their local copy, the server subtracts lr * grad from
    the global model, and the worker replaces its copy with the full model
    when the reply lands. Returns each worker's model after every reply.
    """
    glob = theta0.copy()
    local: dict[int, np.ndarray] = {}
    pending: dict[int, np.ndarray] = {}
    in_flight: dict[int, np.ndarray] = {}
    models: dict[int, list[np.ndarray]] = {}
    for kind, k, _, *rest in trace:
        if kind == COMPUTE_DONE:
            theta = local.setdefault(k, theta0.copy())
            pending[k] = lr * task.grad(ParamVector(theta, task.partition), task.batch(rest[0])).values
        elif kind == ARRIVE_SERVER:
            glob = glob - pending.pop(k)
            in_flight[k] = glob.copy()
        elif kind == ARRIVE_WORKER:
            local[k] = in_flight.pop(k)
            models.setdefault(k, []).append(local[k])
    return models


def check_dense_equivalence(workers: int = 4, exchanges: int = 200) -> tuple[bool, str]:
    cfg = _logistic_cfg(workers, exchanges, 0.0)
    seen: dict[int, list[np.ndarray]] = {}

    def observer(kind, k, sim):
        if kind == ARRIVE_WORKER:
            seen.setdefault(k, []).append(sim.workers[k].theta.values.copy())

    res = run(cfg, observer=observer)
    oracle = dense_asgd_replay(cfg.task, res.theta0.values, cfg.hp.learning_rate, res.trace)
    worst = 0.0
    count = 0
    for k, models in seen.items():
        if len(models) != len(oracle.get(k, [])):
            return False, f"worker {k}: {len(models)} replies vs oracle {len(oracle.get(k, []))}"
        for a, b in zip(models, oracle[k]):
            worst = max(worst, float(np.max(np.abs(a - b))))
            count += 1
    ok = count == exchanges and worst <= 1e-12
    return ok, f"{count} exchanges, max |delta| = {worst:.3e} (tol 1e-12)"


# -- 2: sent accumulator tracks M ---------------------------------------------------------

def check_sent_accumulator() -> tuple[bool, str]:
    details = []
    ok = True
    for r in (0.0, 99.0):
        bad = []

        def observer(kind, k, sim):
            if kind == ARRIVE_SERVER and not np.array_equal(sim.server.sent_accumulator(k).values,
                                                            sim.server.M.values):
                bad.append(sim.server.t)

        run(_logistic_cfg(4, 200, r, record_trace=False), observer=observer)
        ok &= not bad
        details.append(f"R={r:g}: {len(bad)} mismatches")
    return ok, "; ".join(details)


# -- 3: telescoping of a held SAMomentum component ----------------------------------------

def held_component(m: float, lr: float, u_c: float, grads) -> float:
    """Value sent for one component held back for ``len(grads) - 1`` steps."""
    state = VelocityState(ParamVector([u_c]))
    hp = Hyperparams(lr, m)
    T = len(grads)
    g = SparseUpdate()
    for i, gv in enumerate(grads, start=1):
        state, g = optim.samomentum_step(state, ParamVector([gv]), hp, DENSE, mask=[i == T])
    return float(g.values[0]) if g.nnz else 0.0


def check_telescoping(cases: int = 1000, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        m = float(rng.uniform(0.1, 0.9))
        T = int(rng.integers(1, 11))
        lr = float(rng.uniform(0.01, 1.0))
        u_c = float(rng.standard_normal())
        grads = rng.standard_normal(T).tolist()
        expected = m * u_c + lr * math.fsum(grads)
        # relative to the size of the summed terms, so cancellation does not blow up the ratio
        scale = abs(m * u_c) + lr * math.fsum(abs(x) for x in grads)
        worst = max(worst, abs(held_component(m, lr, u_c, grads) - expected) / scale)
    return worst <= 1e-12, f"{cases} cases, max rel err {worst:.3e} (tol 1e-12)"


# -- 4: periodic sending is momentum on an enlarged batch ---------------------------------

def check_enlarged_batch(periods=(2, 4, 8), dim: int = 16, windows: int = 20, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    m, lr = 0.7, 0.05
    worst = 0.0
    for T in periods:
        hp = Hyperparams(lr, m)
        state = VelocityState(ParamVector(np.zeros(dim)))
        ref = np.zeros(dim)
        for _ in range(windows):
            grads = rng.standard_normal((T, dim))
            for i in range(T):
                state, g = optim.samomentum_step(state, ParamVector(grads[i]), hp, DENSE,
                                                 mask=np.full(dim, i == T - 1))
            # classical momentum, batch and rate both x T, on the window's mean gradient
            ref = m * ref + (T * lr) * grads.mean(axis=0)
            sent = g.densify(state.u.partition).values
            worst = max(worst, float(np.max(np.abs(sent - ref) / np.maximum(np.abs(ref), 1e-300))))
    return worst <= 1e-10, f"T in {list(periods)}, max rel err {worst:.3e} (tol 1e-10)"


# -- 5: secondary compression keeps an exact downward ledger ------------------------------

def check_secondary_ledger(workers: int = 8, exchanges: int = 500) -> tuple[bool, str]:
    cfg = _logistic_cfg(workers, exchanges, 99.0, secondary=SparsifyConfig(99.0), record_trace=False)
    sim = Simulation(cfg)
    server = sim.server
    part = cfg.task.partition
    delivered = {k: np.zeros(part.total) for k in range(workers)}
    prev_v = {k: np.zeros(part.total) for k in range(workers)}
    errs = {"ledger": 0.0, "missed_max": 0, "steps": 0}
    inner = server.on_message

    def on_message(data):
        reply, staleness = inner(data)
        down = decode(reply)
        k = down.worker_id
        M = server.M.values
        residual = M - prev_v[k]  # what was owed to k at this step, before sending
        sent = set(down.indices.tolist())
        for sl in part.slices():
            mag = np.abs(residual[sl])
            if mag.max() > 0:
                top = sl.start + np.flatnonzero(mag == mag.max())
                errs["missed_max"] += sum(int(i) not in sent for i in top)
        delivered[k][down.indices] += down.values
        unsent = M - delivered[k]
        err = np.abs(server.pending(k).values - unsent) / np.maximum(1.0, np.abs(M))
        errs["ledger"] = max(errs["ledger"], float(err.max()))
        prev_v[k] = server.sent_accumulator(k).values.copy()
        errs["steps"] += 1
        return reply, staleness

    server.on_message = on_message
    sim.run()
    ok = errs["steps"] == exchanges and errs["missed_max"] == 0 and errs["ledger"] <= 1e-12
    return ok, (f"{errs['steps']} steps, ledger err {errs['ledger']:.3e} (tol 1e-12), "
                f"{errs['missed_max']} per-layer maxima not sent")


# -- 6: byte accounting at R=99 -----------------------------------------------------------

def check_compression_ratio(n: int = 100_000, exchanges: int = 40) -> tuple[bool, str]:
    task = quadratic_bowl(n, seed=0)
    base = dict(workers=4, strategy="samomentum", hp=Hyperparams(0.1, 0.7), sparsify=SparsifyConfig(99.0),
                batch_size=1, max_exchanges=exchanges, seed=0)
    plain = summarize(run(SimConfig(task, **base)))
    second = summarize(run(SimConfig(task, secondary=SparsifyConfig(99.0), **base)))
    bound = 0.022
    ideal = encoded_size(math.ceil(n / 100)) / dense_encoded_size(n)
    ok = (plain["compression_ratio_up"] <= bound and second["compression_ratio_up"] <= bound
          and second["compression_ratio_down"] <= bound)
    return ok, (f"up {plain['compression_ratio_up']:.5f}, down {plain['compression_ratio_down']:.5f} "
                f"without secondary, down {second['compression_ratio_down']:.5f} with secondary "
                f"(bound {bound}, full-k message {ideal:.5f})")


# -- 7: desk-scale convergence ordering ---------------------------------------------------

ORDER = ("dgs_samomentum", "dgc_async", "gd_async", "asgd")
CONVERGENCE_TASK = {"name": "logistic", "n_features": 20, "n_samples": 1000, "separation": 2.5,
                    "label_noise": 0.1}


def convergence_config(method: str, seed: int) -> ExperimentConfig:
    return ExperimentConfig.from_dict({
        "method": method,
        "workers": 1 if method == "msgd" else 8,
        "momentum": 0.7,
        "learning_rate": 4.0,
        "batch_size": 8,
        "epochs": 30,
        "task": dict(CONVERGENCE_TASK, seed=seed),
        "seed": seed,
        **({} if method in ("msgd", "asgd") else {"drop_ratio": 99.0}),
    })


def convergence_matrix(seed: int) -> dict[str, float]:
    out = {}
    for method in ("msgd",) + ORDER:
        _, s = run_experiment(convergence_config(method, seed))
        out[method] = s.get("final_train_acc") if s["diverged"] is None else float("nan")
    return out


def check_convergence(seeds=(0, 1, 2)) -> tuple[bool, str]:
    ordered = 0
    close = True
    rows = []
    for seed in seeds:
        acc = convergence_matrix(seed)
        chain = [acc[m] for m in ORDER]
        hit = all(a >= b for a, b in zip(chain, chain[1:]))
        ordered += hit
        close &= acc["msgd"] - acc["dgs_samomentum"] <= 0.02
        rows.append(f"seed {seed}: " + " ".join(f"{m}={100 * acc[m]:.2f}" for m in ("msgd",) + ORDER)
                    + (" ordered" if hit else " unordered"))
    ok = close and ordered >= 2
    return ok, (f"ordering held on {ordered}/{len(seeds)} seeds (need 2), "
                f"dgs within 2pp of msgd on all: {close}; " + "; ".join(rows))


# -- 8: momentum applied after sparsification loses the held velocity ----------------------

def check_broken_momentum(m: float = 0.7, lr: float = 0.1, T: int = 4) -> tuple[bool, str]:
    grads = [0.3, -0.1, 0.5, 0.2, 0.4]
    hp = Hyperparams(lr, m)
    state = BrokenMomentumState(ParamVector([0.0]), ParamVector([0.0]))
    state, _ = optim.broken_sparse_momentum_step(state, ParamVector([grads[0]]), hp, DENSE, mask=[True])
    u_c = float(state.u.values[0])
    for i in range(1, T + 1):
        state, _ = optim.broken_sparse_momentum_step(state, ParamVector([grads[i]]), hp, DENSE, mask=[i == T])
    broken = float(state.u.values[0])
    telescoped = m * u_c + lr * math.fsum(grads[1:T + 1])
    sam = held_component(m, lr, u_c, grads[1:T + 1])
    ok = broken != telescoped and abs(sam - telescoped) <= 1e-12 * abs(telescoped)
    return ok, f"broken {broken:.12g} vs telescoped {telescoped:.12g} (SAMomentum sends {sam:.12g})"


# -- 9 and 10 ------------------------------------------------------------------------------

def check_gradients(points: int = 10) -> tuple[bool, str]:
    worst = {name: max(gradcheck_report(name, seed=0, points=points)) for name in ("quadratic", "logistic", "mlp")}
    return all(v <= 1e-6 for v in worst.values()), ", ".join(f"{k} {v:.2e}" for k, v in worst.items())


def random_update(rng: np.random.Generator, n: int = 5000) -> SparseUpdate:
    nnz = int(rng.integers(0, 200))
    idx = np.sort(rng.choice(n, size=nnz, replace=False))
    vals = rng.standard_normal(nnz) * 10.0 ** rng.integers(-30, 30, size=nnz)
    return SparseUpdate(idx, vals, timestamp=int(rng.integers(0, 2**32)), worker_id=int(rng.integers(0, 2**32)))


def check_wire_and_determinism(count: int = 1000) -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    bad = 0
    for _ in range(count):
        u = random_update(rng)
        data = encode(u)
        back = decode(data)
        bad += not (back == u and len(data) == encoded_size(u.nnz) and encode(back) == data)
    cfg = convergence_config("dgs_samomentum", 0)
    cfg.epochs = 2
    with tempfile.TemporaryDirectory() as tmp:
        paths = [Path(tmp) / f"run{i}.csv" for i in range(2)]
        for p in paths:
            run_experiment(cfg, csv_path=p)
        same = paths[0].read_bytes() == paths[1].read_bytes()
    return bad == 0 and same, f"{count - bad}/{count} round-trips bit-exact, CSV byte-identical: {same}"


CHECKS = {
    1: ("R=0 equals dense ASGD", check_dense_equivalence, 5.0),
    2: ("sent accumulator equals M", check_sent_accumulator, None),
    3: ("held SAMomentum telescopes", check_telescoping, 1.0),
    4: ("enlarged-batch equivalence", check_enlarged_batch, None),
    5: ("secondary compression ledger", check_secondary_ledger, None),
    6: ("compression ratio at R=99", check_compression_ratio, None),
    7: ("desk-scale convergence ordering", check_convergence, 120.0),
    8: ("broken momentum differs", check_broken_momentum, None),
    9: ("gradient checks", check_gradients, None),
    10: ("wire round-trip and determinism", check_wire_and_determinism, None),
}


def run_check(number: int) -> CheckResult:
    name, fn, budget = CHECKS[number]
    return _timed(number, name, fn, budget)


def run_all(only=None, echo: bool = True) -> list[CheckResult]:
    results = []
    for number in (only or sorted(CHECKS)):
        r = run_check(number)
        if echo:
            print(r.line(), flush=True)
        results.append(r)
    return results
