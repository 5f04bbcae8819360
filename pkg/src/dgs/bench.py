"""Config-driven experiment runner and the ``dgs-bench`` command line.

Exit codes: 0 success, 2 config error, 3 divergence, 4 failed check.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import Hyperparams
from .sim import CSVSink, DelayModel, LinkModel, SimConfig, run, summarize
from .sparsify import ConfigError, SparsifyConfig
from .tasks import gradcheck, make_task

log = logging.getLogger("dgs.bench")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_FAILED = 0, 2, 3, 4

# method -> (worker strategy, momentum placement)
METHODS = {
    "msgd": ("dense", "server"),
    "asgd": ("dense", "server"),
    "gd_async": ("residual", "server"),
    "dgc_async": ("dgc", "worker"),
    "dgs_residual": ("residual", None),
    "dgs_samomentum": ("samomentum", "worker"),
}
DENSE_METHODS = {"msgd", "asgd"}
MOMENTUM_METHODS = {"msgd", "asgd", "gd_async", "dgc_async", "dgs_samomentum"}

_FIELDS = {
    "method", "label", "workers", "drop_ratio", "momentum", "learning_rate", "lr_schedule",
    "batch_size", "epochs", "max_exchanges", "task", "compute", "link",
    "secondary_compression", "secondary_drop_ratio", "seed", "eval_every",
}


class ConfigFieldError(ConfigError):
    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    method: str
    task: dict
    workers: int = 1
    drop_ratio: float = 99.0
    momentum: float = 0.0
    learning_rate: float = 0.1
    lr_schedule: list = field(default_factory=list)
    batch_size: int = 32
    epochs: float = 1.0
    max_exchanges: int | None = None
    compute: dict | list = field(default_factory=lambda: {"kind": "uniform", "a": 8.0, "b": 12.0})
    link: dict = field(default_factory=dict)
    secondary_compression: bool = False
    secondary_drop_ratio: float | None = None
    seed: int = 0
    eval_every: int = 0
    label: str | None = None

    @property
    def name(self) -> str:
        return self.label or self.method

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigFieldError("<root>", "config must be a JSON object")
        unknown = set(raw) - _FIELDS
        if unknown:
            raise ConfigFieldError(sorted(unknown)[0], "unknown field")
        for req in ("method", "task"):
            if req not in raw:
                raise ConfigFieldError(req, "required field missing")
        method = raw["method"]
        if method not in METHODS:
            raise ConfigFieldError("method", f"must be one of {sorted(METHODS)}, got {method!r}")
        if method in MOMENTUM_METHODS and "momentum" not in raw:
            raise ConfigFieldError("momentum", f"required for method {method}")
        if method in DENSE_METHODS and "drop_ratio" in raw:
            log.warning("drop_ratio is ignored for dense method %s", method)
        cfg = cls(**raw)
        cfg._check()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigFieldError("<root>", f"invalid JSON: {exc}") from None
        return cls.from_dict(raw)

    def _check(self) -> None:
        def need(ok, name, msg):
            if not ok:
                raise ConfigFieldError(name, msg)

        need(isinstance(self.workers, int) and self.workers >= 1, "workers", "must be an integer >= 1")
        need(isinstance(self.batch_size, int) and self.batch_size >= 1, "batch_size", "must be an integer >= 1")
        need(isinstance(self.epochs, (int, float)) and self.epochs > 0, "epochs", "must be > 0")
        need(self.max_exchanges is None or (isinstance(self.max_exchanges, int) and self.max_exchanges >= 1),
             "max_exchanges", "must be a positive integer")
        need(isinstance(self.task, dict) and "name" in self.task, "task", "must be an object with a name")
        need(isinstance(self.seed, int) and self.seed >= 0, "seed", "must be a non-negative integer")
        need(self.method != "msgd" or self.workers == 1, "workers", "msgd is single-node, workers must be 1")
        need(self.method != "dgs_samomentum" or 0 < self.momentum < 1, "momentum", "dgs_samomentum needs 0 < m < 1")
        for name, build in (("drop_ratio", lambda: SparsifyConfig(self.drop_ratio)),
                            ("learning_rate", lambda: self.hyperparams()),
                            ("compute", lambda: self.compute_models()),
                            ("link", lambda: LinkModel(**self.link))):
            try:
                build()
            except (TypeError, ValueError) as exc:
                raise ConfigFieldError(name, str(exc)) from None
        if self.secondary_drop_ratio is not None:
            try:
                SparsifyConfig(self.secondary_drop_ratio)
            except ValueError as exc:
                raise ConfigFieldError("secondary_drop_ratio", str(exc)) from None

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.learning_rate, self.momentum, tuple(tuple(x) for x in self.lr_schedule))

    def compute_models(self):
        if isinstance(self.compute, list):
            if len(self.compute) != self.workers:
                raise ValueError("one compute model per worker expected")
            return [DelayModel(**c) for c in self.compute]
        return DelayModel(**self.compute)

    def to_sim_config(self, seed: int | None = None) -> SimConfig:
        try:
            task = make_task(self.task)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigFieldError("task", str(exc)) from None
        strategy, placement = METHODS[self.method]
        hp = self.hyperparams()
        worker_hp = hp if placement == "worker" else Hyperparams(hp.learning_rate, 0.0, hp.lr_schedule)
        secondary = None
        if self.secondary_compression:
            r = self.drop_ratio if self.secondary_drop_ratio is None else self.secondary_drop_ratio
            secondary = SparsifyConfig(r)
        return SimConfig(
            task=task,
            workers=self.workers,
            strategy=strategy,
            hp=worker_hp,
            sparsify=SparsifyConfig(0.0 if self.method in DENSE_METHODS else self.drop_ratio),
            secondary=secondary,
            server_momentum=hp.momentum if placement == "server" else 0.0,
            batch_size=self.batch_size,
            epochs=self.epochs,
            max_exchanges=self.max_exchanges,
            compute=self.compute_models(),
            link=LinkModel(**self.link),
            seed=self.seed if seed is None else seed,
            eval_every=self.eval_every,
        )


def resolve_seed(cli_seed: int | None, config_seed: int) -> int:
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get("DGS_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigFieldError("DGS_SEED", f"not an integer: {env!r}") from None
    return config_seed


def run_experiment(cfg: ExperimentConfig, seed: int | None = None, csv_path=None):
    """Run one config; returns ``(SimResult, summary dict)``."""
    sim_cfg = cfg.to_sim_config(seed)
    if csv_path is None:
        result = run(sim_cfg)
    else:
        with open(csv_path, "w", newline="") as f:
            result = run(sim_cfg, sink=CSVSink(f))
    summary = summarize(result, sim_cfg.task)
    summary.update(method=cfg.method, label=cfg.name, workers=cfg.workers, seed=sim_cfg.seed)
    return result, summary


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result, summary = run_experiment(cfg, resolve_seed(args.seed, cfg.seed), out / "metrics.csv")
    _write_json(out / "summary.json", summary)
    if result.diverged:
        print(result.diverged, file=sys.stderr)
        return EXIT_DIVERGED
    print(f"{cfg.name}: acc={summary.get('final_train_acc')} loss={summary.get('final_loss'):.6g} "
          f"up_ratio={summary['compression_ratio_up']:.4f}")
    return EXIT_OK


def ranking_rows(summaries: list[dict]) -> list[dict]:
    """Table rows (method, workers, accuracy, delta vs baseline); baseline is msgd when present."""
    base = next((s for s in summaries if s["method"] == "msgd"), summaries[0])
    base_acc = base.get("final_train_acc")
    rows = []
    for s in summaries:
        acc = s.get("final_train_acc")
        delta = None if acc is None or base_acc is None else acc - base_acc
        rows.append({"label": s["label"], "method": s["method"], "workers": s["workers"],
                     "accuracy": acc, "delta": delta, "diverged": s["diverged"]})
    return rows


def format_ranking(rows: list[dict]) -> str:
    lines = ["| Workers | Training Method | Accuracy | Delta |", "|---|---|---|---|"]
    for r in rows:
        acc = "diverged" if r["accuracy"] is None else f"{100 * r['accuracy']:.2f}%"
        delta = "-" if r["delta"] is None else f"{100 * r['delta']:+.2f}%"
        lines.append(f"| {r['workers']} | {r['label']} | {acc} | {delta} |")
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    paths = sorted(Path(args.configs).glob("*.json"))
    if len(paths) < 2:
        raise ConfigFieldError("configs", f"need at least 2 configs in {args.configs}")
    cfgs = [ExperimentConfig.load(p) for p in paths]
    for p, c in zip(paths, cfgs):
        if c.task != cfgs[0].task:
            raise ConfigFieldError("task", f"{p.name} uses a different task than {paths[0].name}")
        if c.seed != cfgs[0].seed:
            raise ConfigFieldError("seed", f"{p.name} uses a different seed than {paths[0].name}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summaries = []
    for p, c in zip(paths, cfgs):
        _, s = run_experiment(c, resolve_seed(args.seed, c.seed), out / f"{p.stem}.csv")
        summaries.append(s)
        _write_json(out / f"{p.stem}.summary.json", s)
    rows = ranking_rows(summaries)
    with open(out / "ranking.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    table = format_ranking(rows)
    (out / "ranking.md").write_text(table)
    print(table, end="")
    return EXIT_DIVERGED if any(s["diverged"] for s in summaries) else EXIT_OK


GRADCHECK_TASKS = {
    "quadratic": {"name": "quadratic", "dim": 8},
    "logistic": {"name": "logistic", "n_features": 6, "n_samples": 64},
    "mlp": {"name": "mlp", "layer_sizes": [3, 6, 2], "activation": "tanh",
            "data": {"name": "blobs", "n_features": 3, "n_samples": 64}},
}


def gradcheck_report(task_name: str, seed: int, points: int = 10, perturb: float = 0.0) -> list[float]:
    """Gradcheck errors at ``points`` random parameter/batch draws."""
    task = make_task(GRADCHECK_TASKS[task_name])
    if perturb:
        exact = task.grad
        task.grad = lambda theta, batch=None: (1.0 + perturb) * exact(theta, batch)
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(points):
        theta = task.init_params(rng).with_values(rng.standard_normal(task.n_params))
        batch = None if task.dataset is None else task.batch(rng.choice(task.n_train, 16, replace=False))
        errs.append(gradcheck(task, theta, batch, 1e-5))
    return errs


def cmd_gradcheck(args) -> int:
    names = list(GRADCHECK_TASKS) if args.task == "all" else [args.task]
    seed = resolve_seed(args.seed, 0)
    failed = False
    for name in names:
        errs = gradcheck_report(name, seed, perturb=args.perturb)
        worst = max(errs)
        ok = worst <= 1e-6
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} gradcheck {name}: max rel err {worst:.3e} over {len(errs)} points")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_plot(args) -> int:
    from .plot import load_series, svg_line_chart

    series = load_series(args.input, args.x, args.y)
    Path(args.out).write_text(svg_line_chart(series, args.x, args.y))
    return EXIT_OK


def cmd_acceptance(args) -> int:
    from .acceptance import run_all

    results = run_all(args.only)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgs-bench", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True, help="output directory for metrics.csv and summary.json")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run every config in a directory and rank them")
    c.add_argument("--configs", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_compare)

    pl = sub.add_parser("plot", help="SVG line chart from metrics CSVs")
    pl.add_argument("--input", required=True, action="append", help="metrics CSV; repeat for more series")
    pl.add_argument("--out", required=True)
    pl.add_argument("--x", choices=("time", "step"), default="step")
    pl.add_argument("--y", choices=("loss", "accuracy", "bytes"), default="loss")
    pl.set_defaults(func=cmd_plot)

    g = sub.add_parser("gradcheck", help="finite-difference check of a task gradient")
    g.add_argument("--task", choices=tuple(GRADCHECK_TASKS) + ("all",), default="all")
    g.add_argument("--seed", type=int)
    g.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("acceptance", help="run the acceptance checks")
    a.add_argument("--only", type=int, action="append", help="criterion number; repeatable")
    a.set_defaults(func=cmd_acceptance)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
