"""Command line: dataset generation, training, affinity traces, ablation sweeps.

Every command is a pure function of (config file, flags). JSON summaries hold no
wall-clock values so reruns reproduce them byte for byte; timings go to
``timing.json`` next to them.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import itertools
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, EftsError, SamplingError
from .evalhead import HEADS, evaluate
from .numcore import EncoderParams
from .synthdata import SPLITS, Dataset, DatasetSpec, generate_dataset, load_dataset, save_dataset
from .selection import write_affinity_trace
from .tasks import TaskId, default_tasks, parse_task
from .trainer import (STREAM_TEST, EftsConfig, TrainResult, parse_mode, selection_schedule,
                      stream_rng, train)

log = logging.getLogger("efts")

# section -> key -> parser; anything else in the file is rejected
_INT, _FLOAT, _STR = int, float, str


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


SCHEMA: dict[str, dict[str, Callable[[str], object]]] = {
    "dataset": dict(seed=_INT, path=_STR, n_base=_INT, n_validation=_INT, n_novel=_INT,
                    samples_per_class=_INT, d_in=_INT, sigma_sep=_FLOAT, sigma_in=_FLOAT, warp_seed=_INT),
    "efts": dict(lr0=_FLOAT, decay=_FLOAT, decay_steps=_int_list, una=_INT, m=_INT, q=_INT,
                 selection=_STR, pool_size=_INT, way=_INT, shot=_INT, query=_INT, strategy=_STR,
                 plain_batch_size=_INT, max_itr=_INT, seed=_INT, tau=_FLOAT, hidden=_int_list,
                 workers=_INT, mode=_STR),
    "eval": dict(way=_INT, shot=_INT, query=_INT, episodes=_INT, every=_INT, head=_STR, source=_STR),
    "output": dict(dir=_STR),
}
_EVAL_FIELDS = dict(way="eval_way", shot="eval_shot", query="eval_query", episodes="eval_episodes",
                    every="eval_every", head="eval_head")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    dataset_seed: int = 0
    dataset_path: str = ""
    task_texts: tuple[tuple[int, str], ...] = ()  # empty: the default ten-task set
    efts: EftsConfig = field(default_factory=EftsConfig)
    selection: str = "once"
    mode: str = "efts"
    eval_source: str = "validation"
    out_dir: str = "runs/default"

    def with_flags(self, args: argparse.Namespace) -> "ExperimentConfig":
        cfg = self
        if getattr(args, "seed", None) is not None:
            cfg = replace(cfg, efts=replace(cfg.efts, seed=args.seed))
        if getattr(args, "mode", None):
            cfg = replace(cfg, mode=args.mode)
        if getattr(args, "eval_source", None):
            cfg = replace(cfg, eval_source=args.eval_source)
        return cfg.resolved()

    def resolved(self) -> "ExperimentConfig":
        """Expand the selection schedule against Maxitr and validate everything."""
        self.dataset.validate()
        steps = selection_schedule(self.selection, self.efts.max_itr)
        cfg = replace(self, efts=replace(self.efts, selection_steps=steps))
        parse_mode(cfg.mode)
        _parse_source(cfg.eval_source)
        if cfg.efts.eval_head not in HEADS:
            raise ConfigError(f"eval head must be one of {HEADS}")
        cfg.efts.validate()
        return cfg


def _parse_source(source: str) -> str | None:
    if source == "validation":
        return None
    if source.startswith("cross:") and len(source) > len("cross:"):
        return source[len("cross:"):]
    raise ConfigError(f"eval source must be 'validation' or 'cross:<dataset file>', got {source!r}")


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keep key case so typos are not silently folded
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None

    values: dict[str, dict[str, object]] = {}
    tasks: list[tuple[int, str]] = []
    for section in parser.sections():
        if section == "tasks":
            for key, text in parser.items(section):
                if not key.startswith("task") or not key[4:].isdigit():
                    raise ConfigError(f"[tasks] keys must look like task<N>, got {key!r}")
                tasks.append((int(key[4:]), text))
            continue
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}] in {path}")
        values[section] = {}
        for key, raw in parser.items(section):
            conv = SCHEMA[section].get(key)
            if conv is None:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                values[section][key] = conv(raw.strip())
            except ValueError:
                raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid value") from None

    ds = dict(values.get("dataset", {}))
    dseed, dpath = ds.pop("seed", 0), ds.pop("path", "")
    ef = dict(values.get("efts", {}))
    selection = ef.pop("selection", "once")
    mode = ef.pop("mode", "efts")
    hidden = ef.pop("hidden", None)
    spec = DatasetSpec(**ds)
    if hidden is not None and (not hidden or min(hidden) < 1):
        raise ConfigError("[efts] hidden needs one or more positive layer widths")
    ef["dims"] = (spec.d_in,) + tuple(hidden if hidden is not None else EftsConfig.dims[1:])
    ev = dict(values.get("eval", {}))
    source = ev.pop("source", "validation")
    ef.update({_EVAL_FIELDS[k]: v for k, v in ev.items()})
    out = values.get("output", {}).get("dir", ExperimentConfig.out_dir)
    return ExperimentConfig(spec, dseed, dpath, tuple(sorted(tasks)), EftsConfig(**ef), selection,
                            mode, source, out)


def build_tasks(cfg: ExperimentConfig, n_base: int) -> tuple[TaskId, ...]:
    d_emb = cfg.efts.dims[-1]
    if not cfg.task_texts:
        return default_tasks(n_base, d_emb)
    return tuple(parse_task(i, text, n_base, d_emb) for i, text in cfg.task_texts)


def _load(path: str) -> Dataset:
    try:
        return load_dataset(path)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc.strerror}") from None


def load_data(cfg: ExperimentConfig) -> Dataset:
    """The configured dataset file if one is named, otherwise a fresh in-memory dataset."""
    if cfg.dataset_path:
        return _load(cfg.dataset_path)
    return generate_dataset(cfg.dataset, cfg.dataset_seed)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> None:
    path.write_text(text)


# -- run artifacts ----------------------------------------------------------

def run_summary(cfg: ExperimentConfig, data: Dataset, tasks: Sequence[TaskId], result: TrainResult) -> dict:
    efts = asdict(cfg.efts)
    efts["selection_steps"] = list(cfg.efts.selection_steps)
    return {
        "version": __version__,
        "seed": cfg.efts.seed,
        "mode": cfg.mode,
        "eval_source": cfg.eval_source,
        "dataset": {"seed": data.seed, "spec": asdict(data.spec)},
        "tasks": [t.label for t in tasks],
        "config": json.loads(json.dumps(efts)),
        "subsets": result.log.subsets(),
        "final_loss": result.log.steps[-1]["loss"] if result.log.steps else None,
        "final": result.report.to_dict() if result.report is not None else None,
    }


def save_params(path: Path, result: TrainResult) -> None:
    arrays = {f"encoder_{i}": a for i, a in enumerate(result.encoder.arrays())}
    for idx, head in sorted(result.heads.items()):
        for j, a in enumerate(head.arrays()):
            arrays[f"head{idx}_{j}"] = a
    np.savez(path, **arrays)


def load_encoder(path: str) -> EncoderParams:
    try:
        with np.load(path) as z:
            keys = sorted((k for k in z.files if k.startswith("encoder_")), key=lambda k: int(k.split("_")[1]))
            arrays = [z[k] for k in keys]
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read parameters {path}: {exc}") from None
    if not arrays or len(arrays) % 2:
        raise ConfigError(f"{path} holds no encoder parameters")
    return EncoderParams(tuple(arrays[0::2]), tuple(arrays[1::2]))


def execute_run(cfg: ExperimentConfig, out: Path, data: Dataset | None = None,
                final_eval: bool = True) -> dict:
    """Train once and write the full artifact set into ``out``."""
    data = data if data is not None else load_data(cfg)
    tasks = build_tasks(cfg, len(data.classes("base")))
    cross = _parse_source(cfg.eval_source)
    eval_data = _load(cross) if cross else None
    if eval_data is not None and eval_data.d_in != data.d_in:
        raise ConfigError(f"cross eval dataset has d_in={eval_data.d_in}, expected {data.d_in}")
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = train(cfg.efts, data, tasks, cfg.mode, eval_dataset=eval_data, final_eval=final_eval)
    wall = time.perf_counter() - start

    result.log.write_steps(out / "steps.csv")
    result.log.write_scores(out / "scores.csv")
    result.log.write_evals(out / "evals.csv")
    events = [(t, res) for t, res, _ in result.log.selections if res is not None]
    write_affinity_trace(out / "affinity.csv", events)
    save_params(out / "params.npz", result)
    summary = run_summary(cfg, data, tasks, result)
    _write(out / "summary.json", _dump(summary))
    _write(out / "timing.json", _dump({"wall_time_s": round(wall, 3)}))
    return summary


# -- commands ---------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, args) -> dict:
    target = args.out or cfg.dataset_path
    if not target:
        raise ConfigError("gen-data needs --out or [dataset] path")
    data = generate_dataset(cfg.dataset, cfg.dataset_seed)
    try:
        save_dataset(data, target)
    except OSError as exc:
        raise ConfigError(f"cannot write {target}: {exc.strerror}") from None
    digest = hashlib.sha256(Path(target).read_bytes()).hexdigest()
    return {"classes": {s: len(data.classes(s)) for s in SPLITS}, "d_in": data.d_in,
            "samples_per_class": data.spec.samples_per_class, "seed": data.seed, "sha256": digest}


def cmd_train(cfg: ExperimentConfig, args) -> dict:
    summary = execute_run(cfg, Path(args.out or cfg.out_dir))
    final = summary["final"]
    log.info("final %s accuracy %.2f ± %.2f", final["head"], final["accuracy"], final["ci95"])
    return summary


def cmd_evaluate(cfg: ExperimentConfig, args) -> dict:
    data = load_data(cfg)
    encoder = load_encoder(args.params)
    if encoder.d_in != data.d_in:
        raise ConfigError(f"parameters expect d_in={encoder.d_in}, dataset has {data.d_in}")
    e = cfg.efts
    rep = evaluate(encoder, data, args.split, e.eval_head, e.eval_episodes, e.eval_way, e.eval_shot,
                   e.eval_query, stream_rng(e.seed, STREAM_TEST))
    summary = {"split": args.split, "seed": e.seed, **rep.to_dict()}
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write(Path(args.out) / "summary.json", _dump(summary))
    return summary


def cmd_affinity_trace(cfg: ExperimentConfig, args) -> dict:
    """EFTS run (no final evaluation) whose product is the per-window affinity trace."""
    if parse_mode(cfg.mode)[0] != "efts":
        raise ConfigError("affinity-trace needs --mode efts")
    if not cfg.efts.selection_steps:
        raise ConfigError("affinity-trace needs at least one selection step")
    out = Path(args.out or cfg.out_dir)
    run = execute_run(cfg, out, final_eval=False)
    rows = list(csv.DictReader((out / "affinity.csv").open()))
    table: dict[str, dict[str, list[float]]] = {}
    for r in rows:
        table.setdefault(r["step"], {}).setdefault(r["task"], []).append(float(r["z"]))
    summary = {
        "seed": run["seed"], "tasks": run["tasks"], "subsets": run["subsets"], "rows": len(rows),
        "z_hat": {step: {task: float(np.mean(z)) for task, z in per.items()} for step, per in table.items()},
    }
    _write(out / "summary.json", _dump(summary))
    return summary


SWEEP_KEYS = ("q", "una", "m", "interval", "strategy", "mode")


def parse_sweep(text: str, n_tasks: int) -> list[dict[str, object]]:
    """``key=v1,v2;key=...`` over q, una, m, interval, strategy and mode.
    ``q=all`` expands to 1..|T_set|. Returns the cartesian grid in key order."""
    axes: dict[str, list] = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        key, sep, vals = part.partition("=")
        key = key.strip()
        if not sep or key not in SWEEP_KEYS:
            raise ConfigError(f"bad sweep term {part!r}; keys are {SWEEP_KEYS}")
        if key in axes:
            raise ConfigError(f"sweep key {key!r} given twice")
        items = [v.strip() for v in vals.split(",") if v.strip()]
        if key == "q" and items == ["all"]:
            items = [str(q) for q in range(1, n_tasks + 1)]
        if not items:
            raise ConfigError(f"sweep key {key!r} has no values")
        if key in ("q", "una", "m"):
            try:
                axes[key] = [int(v) for v in items]
            except ValueError:
                raise ConfigError(f"sweep values for {key!r} must be integers") from None
        else:
            axes[key] = items
    keys = list(axes)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


def _apply_point(cfg: ExperimentConfig, point: dict) -> ExperimentConfig:
    efts = {k: point[k] for k in ("q", "una", "m", "strategy") if k in point}
    cfg = replace(cfg, efts=replace(cfg.efts, **efts))
    if "interval" in point:
        cfg = replace(cfg, selection=point["interval"])
    if "mode" in point:
        cfg = replace(cfg, mode=point["mode"])
    return cfg.resolved()


ABLATION_COLUMNS = ("point", "q", "una", "m", "interval", "strategy", "mode", "accuracy", "ci95", "final_subset")


def cmd_ablate(cfg: ExperimentConfig, args) -> dict:
    data = load_data(cfg)
    n_tasks = len(build_tasks(cfg, len(data.classes("base"))))
    grid = parse_sweep(args.sweep, n_tasks)
    points = [_apply_point(cfg, p) for p in grid]  # validate the whole grid before running
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def run(k: int) -> dict:
        return execute_run(points[k], out / f"point_{k:03d}", data)

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        summaries = list(pool.map(run, range(len(points))))

    rows = []
    for k, (p, s) in enumerate(zip(points, summaries)):
        rows.append({
            "point": k, "q": p.efts.q, "una": p.efts.una, "m": p.efts.m, "interval": p.selection,
            "strategy": p.efts.strategy, "mode": p.mode, "accuracy": s["final"]["accuracy"],
            "ci95": s["final"]["ci95"], "final_subset": "|".join(map(str, s["subsets"][-1]["subset"])),
        })
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    summary = {"sweep": args.sweep, "rows": rows}
    _write(out / "summary.json", _dump(summary))
    return summary


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="training seed; overrides [efts] seed")
    common.add_argument("--out", help="output file (gen-data) or run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    run_opts = argparse.ArgumentParser(add_help=False)
    run_opts.add_argument("--mode", help="efts | random | all-tasks | single:<task id>")
    run_opts.add_argument("--eval-source", help="validation | cross:<dataset file>")

    p = argparse.ArgumentParser(prog="efts", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset file")
    sub.add_parser("train", parents=[common, run_opts], help="train and evaluate one configuration")
    ev = sub.add_parser("evaluate", parents=[common], help="evaluate saved encoder parameters")
    ev.add_argument("--params", required=True, help="params.npz from a training run")
    ev.add_argument("--split", default="novel", choices=SPLITS)
    sub.add_parser("affinity-trace", parents=[common, run_opts], help="per-window affinity trace over training")
    ab = sub.add_parser("ablate", parents=[common, run_opts], help="grid of training runs")
    ab.add_argument("--sweep", required=True, help="e.g. 'q=1,2,3;interval=once,every:50'")
    ab.add_argument("--jobs", type=int, default=1, help="sweep points run concurrently")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate,
            "affinity-trace": cmd_affinity_trace, "ablate": cmd_ablate}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_flags(args)
        summary = COMMANDS[args.command](cfg, args)
    except (ConfigError, SamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EftsError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    sys.stdout.write(_dump(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
