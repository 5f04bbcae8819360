"""Deterministic discrete-event simulation of asynchronous parameter-server training.

Time is simulated milliseconds. A worker computes a gradient (compute
delay), ships it upward (link transfer time), the server applies it and
ships the downward delta back (transfer time), and only then does the
worker start its next computation. The server handles one message at a
time in event order; ties in time are broken by insertion order.
"""
from __future__ import annotations

import heapq
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .optim import Hyperparams
from .server import ParameterServer
from .sparsify import SparsifyConfig
from .tasks import Task
from .tensor import NumericOverflowError, ParamVector, dense_encoded_size
from .worker import DivergedError, Worker

CSV_COLUMNS = (
    "sim_time_ms", "step", "worker", "staleness", "loss", "acc",
    "bytes_up", "bytes_down", "cum_bytes_up", "cum_bytes_down",
)

COMPUTE_DONE = "ComputeDone"
ARRIVE_SERVER = "ArriveServer"
ARRIVE_WORKER = "ArriveWorker"


@dataclass(frozen=True)
class DelayModel:
    """Random delay in ms: ``fixed(a)``, ``uniform(a, b)`` or ``exponential(mean=a)``."""

    kind: str = "fixed"
    a: float = 10.0
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "exponential"):
            raise ValueError(f"unknown delay kind {self.kind!r}")
        if self.a < 0 or self.b < 0 or (self.kind == "uniform" and self.b < self.a):
            raise ValueError(f"invalid delay parameters {self}")

    @classmethod
    def around(cls, mean: float, spread: float = 0.2) -> "DelayModel":
        """uniform((1 - spread) * mean, (1 + spread) * mean)"""
        return cls("uniform", (1 - spread) * mean, (1 + spread) * mean)

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "fixed":
            return float(self.a)
        if self.kind == "uniform":
            return float(rng.uniform(self.a, self.b))
        return float(rng.exponential(self.a)) if self.a > 0 else 0.0


@dataclass(frozen=True)
class LinkModel:
    latency: float = 0.05          # ms
    bandwidth: float = 125_000.0   # bytes per ms, i.e. 1 Gbit/s

    def __post_init__(self):
        if self.latency < 0 or not self.bandwidth > 0:
            raise ValueError(f"invalid link {self}")

    def transfer_time(self, nbytes: int) -> float:
        return self.latency + nbytes / self.bandwidth


@dataclass(order=True, frozen=True)
class SimEvent:
    time: float
    seq: int
    kind: str = field(compare=False)
    worker: int = field(compare=False)
    payload: bytes | None = field(default=None, compare=False, repr=False)


@dataclass
class MetricsRecord:
    sim_time_ms: float
    step: int
    worker: int
    staleness: int
    loss: float | None
    acc: float | None
    bytes_up: int
    bytes_down: int
    cum_bytes_up: int
    cum_bytes_down: int

    def csv_line(self) -> str:
        def fmt(x):
            if x is None:
                return ""
            return repr(float(x)) if isinstance(x, float) else str(x)
        return ",".join(fmt(getattr(self, c)) for c in CSV_COLUMNS)


class CSVSink:
    """Writes records as CSV lines to a text stream."""

    def __init__(self, stream: io.TextIOBase, header: bool = True):
        self.stream = stream
        if header:
            stream.write(",".join(CSV_COLUMNS) + "\n")

    def __call__(self, rec: MetricsRecord) -> None:
        self.stream.write(rec.csv_line() + "\n")


def metrics_csv(records: Iterable[MetricsRecord]) -> str:
    buf = io.StringIO()
    sink = CSVSink(buf)
    for r in records:
        sink(r)
    return buf.getvalue()


@dataclass
class SimConfig:
    task: Task
    workers: int = 4
    strategy: str = "samomentum"
    hp: Hyperparams = field(default_factory=lambda: Hyperparams(0.1, 0.7))
    sparsify: SparsifyConfig = field(default_factory=lambda: SparsifyConfig(99.0))
    secondary: SparsifyConfig | None = None
    server_momentum: float = 0.0
    batch_size: int = 32
    epochs: float = 1.0
    max_exchanges: int | None = None
    compute: DelayModel | list[DelayModel] = field(default_factory=lambda: DelayModel.around(10.0))
    link: LinkModel = field(default_factory=LinkModel)
    seed: int = 0
    eval_every: int = 0
    theta0: ParamVector | None = None
    record_trace: bool = False

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("need at least one worker")
        if self.max_exchanges is None and not self.epochs > 0:
            raise ValueError("epochs must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if isinstance(self.compute, (list, tuple)) and len(self.compute) != self.workers:
            raise ValueError("one compute delay model per worker expected")

    @property
    def total_exchanges(self) -> int:
        if self.max_exchanges is not None:
            return int(self.max_exchanges)
        return max(1, math.ceil(self.epochs * self.task.n_train / self.batch_size))

    def compute_model(self, k: int) -> DelayModel:
        return self.compute[k] if isinstance(self.compute, (list, tuple)) else self.compute


@dataclass
class SimResult:
    records: list[MetricsRecord]
    server: ParameterServer
    workers: list[Worker]
    theta0: ParamVector
    diverged: str | None = None
    trace: list[tuple] = field(default_factory=list)

    @property
    def global_model(self) -> ParamVector:
        return self.server.global_model(self.theta0)

    def csv(self) -> str:
        return metrics_csv(self.records)


def evaluate(task: Task, theta: ParamVector, X=None, y=None) -> tuple[float, float | None]:
    """Full-dataset mean loss and 0/1 accuracy (None for tasks without labels)."""
    if task.dataset is None:
        return task.loss(theta), None
    if X is None:
        X, y = task.dataset.X_train, task.dataset.y_train
    loss = task.loss(theta, (X, y))
    pred = task.predict(theta, X)
    acc = None if pred is None else float(np.mean(pred == y))
    return loss, acc


class _BatchSampler:
    """Walks a fresh permutation of the training set per pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._perm = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        out = []
        need = min(self.batch_size, self.n)
        while need:
            if self._pos >= self._perm.size:
                self._perm = self.rng.permutation(self.n)
                self._pos = 0
            take = self._perm[self._pos:self._pos + need]
            self._pos += take.size
            need -= take.size
            out.append(take)
        return np.concatenate(out)


Observer = Callable[[str, int, "Simulation"], None]


class Simulation:
    """Event loop state; ``run`` is the usual entry point."""

    def __init__(self, cfg: SimConfig, sink: Callable[[MetricsRecord], None] | None = None,
                 observer: Observer | None = None):
        self.cfg = cfg
        self.sink = sink
        self.observer = observer
        task = cfg.task
        seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.workers + 2)
        self.delay_rng = np.random.default_rng(seeds[0])
        init_rng = np.random.default_rng(seeds[1])
        self.theta0 = cfg.theta0 if cfg.theta0 is not None else task.init_params(init_rng)
        self.server = ParameterServer(task.partition, cfg.secondary, cfg.server_momentum)
        self.workers: list[Worker] = []
        self.samplers: list[_BatchSampler] = []
        for k in range(cfg.workers):
            self.server.register_worker(k)
            self.workers.append(Worker(k, self.theta0, task, cfg.strategy, cfg.hp, cfg.sparsify))
            self.samplers.append(_BatchSampler(task.n_train, cfg.batch_size, np.random.default_rng(seeds[k + 2])))
        self.now = 0.0
        self._queue: list[SimEvent] = []
        self._seq = 0
        self.dispatched = 0
        self.samples_seen = 0
        self.records: list[MetricsRecord] = []
        self.trace: list[tuple] = []
        self.cum_up = 0
        self.cum_down = 0
        self.diverged: str | None = None

    def schedule(self, delay: float, kind: str, k: int, payload: bytes | None = None) -> None:
        heapq.heappush(self._queue, SimEvent(self.now + delay, self._seq, kind, k, payload))
        self._seq += 1

    def _start_compute(self, k: int) -> None:
        if self.dispatched < self.cfg.total_exchanges:
            self.dispatched += 1
            self.schedule(self.cfg.compute_model(k).sample(self.delay_rng), COMPUTE_DONE, k)

    def _on_compute_done(self, k: int) -> None:
        idx = self.samplers[k].next()
        epoch = self.samples_seen // self.cfg.task.n_train
        self.samples_seen += idx.size
        if self.cfg.record_trace:
            self.trace.append((COMPUTE_DONE, k, self.now, idx))
        data = self.workers[k].send(self.cfg.task.batch(idx), epoch)
        self.schedule(self.cfg.link.transfer_time(len(data)), ARRIVE_SERVER, k, data)

    def _on_arrive_server(self, k: int, data: bytes) -> None:
        reply, staleness = self.server.on_message(data)
        self.cum_up += len(data)
        self.cum_down += len(reply)
        step = self.server.t
        loss = acc = None
        every = self.cfg.eval_every
        if step == self.cfg.total_exchanges or (every and step % every == 0):
            with np.errstate(over="ignore", invalid="ignore"):
                loss, acc = evaluate(self.cfg.task, self.server.global_model(self.theta0))
        rec = MetricsRecord(self.now, step, k, staleness, loss, acc,
                            len(data), len(reply), self.cum_up, self.cum_down)
        self.records.append(rec)
        if self.sink is not None:
            self.sink(rec)
        if loss is not None and not math.isfinite(loss):
            raise DivergedError(step, "non-finite loss")
        if self.cfg.record_trace:
            self.trace.append((ARRIVE_SERVER, k, self.now))
        self.schedule(self.cfg.link.transfer_time(len(reply)), ARRIVE_WORKER, k, reply)

    def _on_arrive_worker(self, k: int, data: bytes) -> None:
        self.workers[k].receive(data)
        if self.cfg.record_trace:
            self.trace.append((ARRIVE_WORKER, k, self.now))
        self._start_compute(k)

    def run(self) -> SimResult:
        for k in range(self.cfg.workers):
            self._start_compute(k)
        try:
            while self._queue:
                ev = heapq.heappop(self._queue)
                self.now = ev.time
                if ev.kind == COMPUTE_DONE:
                    self._on_compute_done(ev.worker)
                elif ev.kind == ARRIVE_SERVER:
                    self._on_arrive_server(ev.worker, ev.payload)
                else:
                    self._on_arrive_worker(ev.worker, ev.payload)
                if self.observer is not None:
                    self.observer(ev.kind, ev.worker, self)
        except (DivergedError, NumericOverflowError) as exc:
            self.diverged = f"diverged at t={self.server.t}, sim_time={self.now!r} ms: {exc}"
        return SimResult(self.records, self.server, self.workers, self.theta0, self.diverged, self.trace)


def run(cfg: SimConfig, sink=None, observer: Observer | None = None) -> SimResult:
    return Simulation(cfg, sink, observer).run()


def summarize(result: SimResult, task: Task | None = None) -> dict:
    """Final loss/accuracy, byte totals, mean staleness and compression ratios."""
    recs = result.records
    n = result.theta0.partition.total
    exchanges = len(recs)
    dense = exchanges * dense_encoded_size(n)
    out = {
        "exchanges": exchanges,
        "diverged": result.diverged,
        "total_bytes_up": recs[-1].cum_bytes_up if recs else 0,
        "total_bytes_down": recs[-1].cum_bytes_down if recs else 0,
        "mean_staleness": float(np.mean([r.staleness for r in recs])) if recs else 0.0,
        "sim_time_ms": recs[-1].sim_time_ms if recs else 0.0,
    }
    out["compression_ratio_up"] = out["total_bytes_up"] / dense if dense else 0.0
    out["compression_ratio_down"] = out["total_bytes_down"] / dense if dense else 0.0
    if task is not None and result.diverged is None:
        theta = result.global_model
        loss, acc = evaluate(task, theta)
        out["final_loss"] = loss
        out["final_train_acc"] = acc
        if task.dataset is not None and len(task.dataset.y_test):
            out["final_test_acc"] = evaluate(task, theta, task.dataset.X_test, task.dataset.y_test)[1]
    return out
