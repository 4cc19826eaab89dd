"""``histograph`` command line: gen, train, eval, cache, ft, diagnose.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.

``--config`` takes a JSON object with flat keys named after the flags
(``"lr": 0.01``). Dotted keys reach deeper settings: ``pool.<field>`` sets a
HistoGraph pool option and ``gen.<param>`` a generator parameter. Explicit
flags win over the file. Every run writes the fully resolved config as
``config.json`` next to its outputs; feeding it back through ``--config``
repeats the run.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import diagnostics as diag
from .errors import (ConfigError, ContractError, DivergenceError, FormatError, IngestionError,
                     ParameterError, ShapeError)
from .graphdata import batch_graphs, generate_synthetic, load_jsonl, load_tu_format, save_jsonl
from .histopool import PoolConfig
from . import numcore as nc

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

TASK_FLAGS = {"graph": "graph_class", "node": "node_class", "regress": "node_regress"}
MODE_FLAGS = {"e2e": "end_to_end", "ft": "ft_frozen", "fullft": "full_ft"}
POOL_FLAGS = {"histograph": "histograph", "mean": "mean", "sum": "sum", "max": "max", "jk": "jk_concat"}

DEFAULTS = {
    "kind": "community_classes", "seed": 0, "pool": "histograph", "backbone": "gin", "layers": 5,
    "hidden": 32, "heads": 4, "epochs": 100, "lr": 0.01, "wd": 0.0, "batch": 32,
}


FLAT_KEYS = {"data", "kind", "n", "p", "graphs", "seed", "out", "pool", "backbone", "layers", "hidden",
             "heads", "epochs", "lr", "wd", "batch", "mode", "cache", "checkpoint", "task"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add(p, *names, **kw):
    p.add_argument(*names, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="histograph", description="HistoGraph readout experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, *extra):
        _add(p, "--config", help="JSON file of flat flag keys; flags win")
        _add(p, "--seed", type=int)
        _add(p, "--out", help="output file (gen, cache) or directory")
        for name in extra:
            SHARED[name](p)

    SHARED = {
        "data": lambda p: _add(p, "--data", help="JSONL file or TU-format directory"),
        "model": lambda p: [
            _add(p, "--pool", choices=sorted(POOL_FLAGS)),
            _add(p, "--backbone", choices=["gcn", "gin"]),
            _add(p, "--layers", type=int),
            _add(p, "--hidden", type=int),
            _add(p, "--heads", type=int),
            _add(p, "--task", choices=sorted(TASK_FLAGS)),
        ],
        "optim": lambda p: [
            _add(p, "--epochs", type=int),
            _add(p, "--lr", type=float),
            _add(p, "--wd", type=float),
            _add(p, "--batch", type=int),
            _add(p, "--mode", choices=sorted(MODE_FLAGS)),
        ],
        "checkpoint": lambda p: _add(p, "--checkpoint"),
        "cache": lambda p: _add(p, "--cache"),
    }

    gen = sub.add_parser("gen", help="write a synthetic dataset as JSONL")
    common(gen)
    _add(gen, "--kind", help="barbell | bridge | community (or full generator names)")
    _add(gen, "--n", type=int)
    _add(gen, "--p", type=float)
    _add(gen, "--graphs", type=int, help="number of graphs")

    common(sub.add_parser("train", help="end-to-end or full fine-tuning run"),
           "data", "model", "optim", "checkpoint")
    common(sub.add_parser("eval", help="evaluate a checkpoint"), "data", "checkpoint")
    common(sub.add_parser("cache", help="cache backbone activations"), "data", "checkpoint")
    common(sub.add_parser("ft", help="frozen-backbone head fine-tuning from a cache"),
           "cache", "model", "optim", "checkpoint")
    common(sub.add_parser("diagnose", help="feature distance, drift, attention and timing CSVs"),
           "data", "checkpoint")
    return parser


# config resolution


def _load_config_file(path: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return raw


def resolve(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        from_file = _load_config_file(args.config)
        from_file.pop("command", None)
        cfg.update(from_file)
    cfg.update(given)
    pool_fields = {f.name for f in fields(PoolConfig)}
    for key in cfg:
        head, _, rest = key.partition(".")
        if not rest and key not in FLAT_KEYS:
            raise UsageError(f"unknown config key {key!r}")
        if rest and (head not in ("pool", "gen") or (head == "pool" and rest not in pool_fields)):
            raise UsageError(f"unknown config key {key!r}")
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise UsageError(f"missing required flag --{k}")


def _write_resolved(cfg: dict, command: str, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    blob = json.dumps({"command": command, **cfg}, indent=2, sort_keys=True)
    (directory / "config.json").write_text(blob + "\n", encoding="utf-8")


def _outdir(cfg: dict, fallback: str) -> Path:
    return Path(cfg.get("out") or fallback)


def _load_data(path: str):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"data path does not exist: {path}")
    return load_tu_format(p) if p.is_dir() else load_jsonl(p)


def _infer_task(cfg: dict, graphs) -> str:
    if "task" in cfg:
        return TASK_FLAGS[cfg["task"]]
    g = graphs[0]
    if g.label is not None:
        return "graph_class"
    if g.node_labels is not None:
        return "node_class"
    if g.node_targets is not None:
        return "node_regress"
    raise ContractError("dataset carries no labels or targets")


def _train_config(cfg: dict, task: str, mode: str):
    from .trainer import TrainConfig

    pool_over = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("pool.")}
    pool = PoolConfig(**{**asdict(PoolConfig()), **pool_over, "heads": cfg["heads"], "hidden": cfg["hidden"]})
    try:
        return TrainConfig(
            epochs=cfg["epochs"], batch_size=cfg["batch"], lr=cfg["lr"], weight_decay=cfg["wd"],
            seed=cfg["seed"], task=task, readout=POOL_FLAGS[cfg["pool"]], backbone=cfg["backbone"],
            layers=cfg["layers"], hidden=cfg["hidden"], pool=pool, mode=mode,
            cache_path=cfg.get("cache"), checkpoint_path=cfg.get("checkpoint"),
        )
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def _run_hash(cfg: dict) -> str:
    """Hash of everything that shapes the numbers; the output location does not."""
    return diag.config_hash({k: v for k, v in cfg.items() if k != "out"})


def _metric_series(metrics: list[dict], seed: int, digest: str) -> list:
    """Per-epoch numbers except wall-clock time, which is not reproducible."""
    names = sorted({k for r in metrics for k, v in r.items()
                    if k not in ("epoch", "epoch_time") and isinstance(v, (int, float))})
    out = []
    for name in names:
        pts = [(r["epoch"], r[name]) for r in metrics if name in r and r[name] == r[name]]
        if pts:
            out.append(diag.DiagnosticSeries(name, [e for e, _ in pts], [v for _, v in pts], seed, digest))
    return out


def _finish_training(ckpt, metrics, cfg, command, outdir: Path) -> None:
    _write_resolved(cfg, command, outdir)
    ckpt.save(outdir / "checkpoint.bin")
    digest = _run_hash(cfg)
    series = _metric_series(metrics, cfg["seed"], digest)
    if metrics and "alpha" in metrics[0]:
        series += diag.attention_trace(ckpt).series()
    diag.write_csv(series, outdir / "metrics.csv")
    last = metrics[-1]
    summary = {k: v for k, v in last.items() if k not in ("alpha", "scores", "epoch_time")}
    print(json.dumps(summary, sort_keys=True))


# subcommands


def cmd_gen(cfg: dict) -> int:
    _require(cfg, "out")
    params = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("gen.")}
    kind = cfg["kind"]
    if "n" in cfg:
        params["n"] = cfg["n"]
    if "p" in cfg:
        params["p_in" if kind in ("community", "community_classes") else "p"] = cfg["p"]
    if "graphs" in cfg:
        params["num_graphs"] = cfg["graphs"]
    graphs = generate_synthetic(kind, params, cfg["seed"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(graphs, out)
    _write_resolved(cfg, "gen", out.parent)
    print(f"wrote {len(graphs)} graphs to {out}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    from .trainer import Checkpoint, train

    _require(cfg, "data")
    mode = MODE_FLAGS[cfg.get("mode", "e2e")]
    if mode == "ft_frozen":
        raise UsageError("--mode ft conflicts with the train subcommand; use `histograph ft`")
    if mode == "full_ft":
        _require(cfg, "checkpoint")
    elif cfg.get("checkpoint"):
        raise UsageError("--checkpoint with --mode e2e is ambiguous; pass --mode fullft to start from it")
    graphs = _load_data(cfg["data"])
    config = _train_config(cfg, _infer_task(cfg, graphs), mode)
    source = Checkpoint.load(cfg["checkpoint"]) if mode == "full_ft" else None
    ckpt, metrics = train(graphs, config, source)
    _finish_training(ckpt, metrics, cfg, "train", _outdir(cfg, "run"))
    return EXIT_OK


def cmd_ft(cfg: dict) -> int:
    from .trainer import ActivationCache, Checkpoint, finetune_head

    _require(cfg, "cache")
    if cfg.get("mode", "ft") != "ft":
        raise UsageError(f"--mode {cfg['mode']} conflicts with the ft subcommand")
    cache_path = Path(cfg["cache"])
    if not cache_path.is_file():
        raise FileNotFoundError(f"activation cache not found: {cache_path}")
    cache = ActivationCache.load(cache_path)
    source = Checkpoint.load(cfg["checkpoint"]) if cfg.get("checkpoint") else None
    graphs = cache.graphs
    config = _train_config(cfg, _infer_task(cfg, graphs), "ft_frozen")
    ckpt = finetune_head(cache, config, source)
    _finish_training(ckpt, ckpt.history, cfg, "ft", _outdir(cfg, "run"))
    return EXIT_OK


def cmd_cache(cfg: dict) -> int:
    from .trainer import Checkpoint, cache_activations

    _require(cfg, "data", "checkpoint", "out")
    cache = cache_activations(_load_data(cfg["data"]), Checkpoint.load(cfg["checkpoint"]), cfg["out"])
    _write_resolved(cfg, "cache", Path(cfg["out"]).parent)
    num_layers, width = cache.shape
    print(f"cached {len(cache)} graphs (L={num_layers}, D={width}) to {cfg['out']}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    from .trainer import Checkpoint, evaluate

    _require(cfg, "data", "checkpoint")
    metrics = evaluate(_load_data(cfg["data"]), Checkpoint.load(cfg["checkpoint"]))
    print(json.dumps(metrics, sort_keys=True))
    outdir = _outdir(cfg, "eval")
    _write_resolved(cfg, "eval", outdir)
    digest = _run_hash(cfg)
    diag.write_csv([diag.DiagnosticSeries(k, [0], [v], cfg["seed"], digest)
                    for k, v in sorted(metrics.items()) if v == v], outdir / "metrics.csv")
    return EXIT_OK


def cmd_diagnose(cfg: dict) -> int:
    from .trainer import Checkpoint, model_from_checkpoint

    _require(cfg, "data", "checkpoint")
    graphs = _load_data(cfg["data"])
    ckpt = Checkpoint.load(cfg["checkpoint"])
    model = model_from_checkpoint(ckpt)
    if graphs[0].in_dim != model.config.backbone.in_dim:
        raise ContractError("dataset feature width does not match the checkpoint backbone")
    with nc.no_grad():
        hist = model.history(batch_graphs(graphs))
    outdir = _outdir(cfg, "diagnose")
    _write_resolved(cfg, "diagnose", outdir)
    digest = diag.config_hash(ckpt.config)
    seed = cfg["seed"]
    layers = list(range(hist.num_layers))
    diag.write_csv([diag.DiagnosticSeries("feature_distance", layers,
                                          [diag.feature_distance(hist, l) for l in layers], seed, digest)],
                   outdir / "feature_distance.csv")
    diag.write_csv([diag.DiagnosticSeries("embedding_drift", layers, diag.embedding_drift(hist), seed, digest)],
                   outdir / "drift.csv")
    written = ["feature_distance.csv", "drift.csv"]
    if model.config.readout == "histograph" and ckpt.history:
        diag.write_csv(diag.attention_trace(ckpt).series(), outdir / "attention.csv")
        written.append("attention.csv")
    if len(ckpt.history) >= 6:
        timing = diag.epoch_timer(ckpt)
        diag.write_csv([diag.DiagnosticSeries("epoch_seconds", [0], [timing.seconds], seed, timing.config_hash)],
                       outdir / "timing.csv")
        written.append("timing.csv")
    print("wrote " + ", ".join(str(outdir / w) for w in written))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "cache": cmd_cache,
            "ft": cmd_ft, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("histograph: a subcommand is required (" + ", ".join(COMMANDS) + ")")
        return COMMANDS[args.command](resolve(args))
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, IsADirectoryError, PermissionError, IngestionError, FormatError,
            ContractError, ShapeError, ParameterError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
