import math

import numpy as np
import pytest

from dgs.optim import Hyperparams
from dgs.sim import (
    ARRIVE_SERVER,
    ARRIVE_WORKER,
    COMPUTE_DONE,
    CSV_COLUMNS,
    DelayModel,
    LinkModel,
    SimConfig,
    evaluate,
    run,
    summarize,
)
from dgs.sparsify import SparsifyConfig
from dgs.tasks import logistic_task, quadratic_bowl
from dgs.tensor import ParamVector

INSTANT = LinkModel(latency=1.0, bandwidth=math.inf)


def test_delay_and_link_models():
    rng = np.random.default_rng(0)
    assert DelayModel("fixed", 3.0).sample(rng) == 3.0
    xs = [DelayModel.around(10.0).sample(rng) for _ in range(200)]
    assert min(xs) >= 8.0 and max(xs) <= 12.0
    assert all(DelayModel("exponential", 2.0).sample(rng) >= 0 for _ in range(100))
    assert LinkModel(0.5, 100.0).transfer_time(1000) == 10.5
    with pytest.raises(ValueError):
        LinkModel(0.0, 0.0)
    with pytest.raises(ValueError):
        DelayModel("uniform", 5.0, 1.0)


def test_single_worker_round_robin():
    task = quadratic_bowl(3, seed=0)
    cfg = SimConfig(task, workers=1, strategy="dense", hp=Hyperparams(0.1), max_exchanges=5,
                    compute=DelayModel("fixed", 10.0), link=INSTANT, record_trace=True)
    res = run(cfg)
    kinds = [e[0] for e in res.trace]
    assert kinds == [COMPUTE_DONE, ARRIVE_SERVER, ARRIVE_WORKER] * 5
    assert [r.staleness for r in res.records] == [1] * 5
    assert [r.step for r in res.records] == [1, 2, 3, 4, 5]


def test_two_worker_calendar_by_hand():
    task = quadratic_bowl(2, seed=0)
    cfg = SimConfig(task, workers=2, strategy="dense", hp=Hyperparams(0.1), max_exchanges=6,
                    compute=[DelayModel("fixed", 10.0), DelayModel("fixed", 15.0)], link=INSTANT,
                    record_trace=True)
    res = run(cfg)
    first = [(kind, k, t) for kind, k, t, *_ in res.trace[:6]]
    assert first == [
        (COMPUTE_DONE, 0, 10.0), (ARRIVE_SERVER, 0, 11.0), (ARRIVE_WORKER, 0, 12.0),
        (COMPUTE_DONE, 1, 15.0), (ARRIVE_SERVER, 1, 16.0), (ARRIVE_WORKER, 1, 17.0),
    ]
    # worker 0 restarts at 12 and finishes at 22; worker 1 restarts at 17 -> 32
    assert [(k, t) for kind, k, t, *_ in res.trace if kind == COMPUTE_DONE][:4] == [
        (0, 10.0), (1, 15.0), (0, 22.0), (1, 32.0)]


def small_cfg(**kw):
    task = logistic_task(20, 300, seed=1)
    base = dict(workers=3, strategy="samomentum", hp=Hyperparams(0.2, 0.7), sparsify=SparsifyConfig(90),
                batch_size=16, epochs=2, seed=5, eval_every=10)
    base.update(kw)
    return SimConfig(task, **base)


def test_same_seed_same_csv():
    a, b = run(small_cfg()).csv(), run(small_cfg()).csv()
    assert a == b
    assert a.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert run(small_cfg(seed=6)).csv() != a


def test_metrics_invariants():
    res = run(small_cfg(secondary=SparsifyConfig(90)))
    recs = res.records
    assert [r.step for r in recs] == list(range(1, len(recs) + 1))
    assert len(recs) == small_cfg().total_exchanges
    for prev, r in zip(recs, recs[1:]):
        assert r.cum_bytes_up == prev.cum_bytes_up + r.bytes_up
        assert r.cum_bytes_down == prev.cum_bytes_down + r.bytes_down
        assert r.sim_time_ms >= prev.sim_time_ms
    assert all(r.staleness >= 1 for r in recs)
    assert all((r.bytes_up - 16) % 12 == 0 and (r.bytes_down - 16) % 12 == 0 for r in recs)
    assert recs[-1].loss is not None and recs[9].loss is not None and recs[8].loss is None


def test_server_messages_are_serialized():
    seen = []

    def observer(kind, k, sim):
        if kind == ARRIVE_SERVER:
            seen.append((sim.now, sim.server.t))

    run(small_cfg(workers=5, compute=DelayModel("exponential", 5.0)), observer=observer)
    ts = [t for _, t in seen]
    assert ts == list(range(1, len(ts) + 1))
    assert all(a[0] <= b[0] for a, b in zip(seen, seen[1:]))


def test_byte_counts_match_encoded_lengths():
    sizes = []

    def observer(kind, k, sim):
        if kind == ARRIVE_SERVER:
            sizes.append(sim.records[-1].bytes_up)

    res = run(small_cfg(record_trace=False), observer=observer)
    assert sizes == [r.bytes_up for r in res.records]
    # every worker message of a 21-parameter model at R=90 keeps ceil(2)+1 entries at most
    assert max(sizes) <= 16 + 12 * 3


def test_divergence_is_reported_with_partial_metrics():
    task = quadratic_bowl(2, optimum=[1.0, -1.0])
    cfg = SimConfig(task, workers=2, strategy="dense", hp=Hyperparams(3.0), server_momentum=0.9,
                    max_exchanges=2000, eval_every=1)
    res = run(cfg)
    assert res.diverged is not None
    assert 0 < len(res.records) < 2000
    assert not math.isfinite(res.records[-1].loss)
    assert all(math.isfinite(r.loss) for r in res.records[:-1])


def test_evaluate_matches_per_sample_loop():
    task = logistic_task(5, 125, seed=3)
    theta = ParamVector(np.random.default_rng(0).standard_normal(6), task.partition)
    X, y = task.dataset.X_train[:100], task.dataset.y_train[:100]
    loss, acc = evaluate(task, theta, X, y)
    losses, hits = [], []
    for xi, yi in zip(X, y):
        z = float(xi @ theta.values[:-1] + theta.values[-1])
        p = 1 / (1 + math.exp(-z))
        losses.append(-math.log(p) if yi == 1 else -math.log(1 - p))
        hits.append(int((z > 0) == (yi == 1)))
    assert loss == pytest.approx(sum(losses) / 100, rel=1e-12)
    assert acc == sum(hits) / 100


def test_evaluate_quadratic_minimum_and_separable_fit():
    task = quadratic_bowl(3, optimum=[1.0, 2.0, 3.0])
    assert evaluate(task, ParamVector(task.optimum)) == (0.0, None)
    sep = logistic_task(2, 100, separation=40.0, seed=0)
    w = sep.dataset.X_train[sep.dataset.y_train == 1].mean(0) - sep.dataset.X_train[sep.dataset.y_train == 0].mean(0)
    assert evaluate(sep, ParamVector(np.append(w, 0.0), sep.partition))[1] == 1.0


def test_summary_fields():
    res = run(small_cfg())
    s = summarize(res, res.workers[0].task)
    assert s["exchanges"] == len(res.records)
    assert 0 < s["compression_ratio_up"] < 1
    assert s["mean_staleness"] >= 1
    assert 0 <= s["final_train_acc"] <= 1
