"""Run configuration, evaluation protocol, seed replication and sweeps.

Directory layout written by :func:`run_seed`::

    <out>/seed-<s>/metrics.jsonl        training log
    <out>/seed-<s>/checkpoint/          final model
    <out>/seed-<s>/metrics.json         InfoM/InfoE/InfoC/PSNR
    <out>/seed-<s>/nmi.csv              n_s x n_z NMI plus an active-mask row

A sweep puts each cell under ``<out>/<axis>=<value>/seed-<s>`` and writes
``sweep.csv`` (sorted by InfoM) and ``best.json`` next to them.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .autoencoder import ModelState, TrainConfig, embed, load_checkpoint, reconstruct, train
from .infomec import DISCRETE, CONTINUOUS, ConstantSourceError, EvalSample, NmiReport, infomec
from .numerics import RngStream
from .world import DEFAULT_CARDINALITIES, DEFAULT_IMAGE_SIZE, Dataset, SourceSpace, build_dataset, load_dataset

log = logging.getLogger(__name__)

DEFAULT_N_EVAL = 10_000
_STREAM_EVAL = 2


class ConfigError(ValueError):
    """Invalid run or sweep configuration."""


def _strict_keys(d: dict, valid: set[str], what: str):
    unknown = sorted(set(d) - valid)
    if unknown:
        raise ConfigError(f"unknown {what} keys {unknown}; valid keys are {sorted(valid)}")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str | None = None  # dataset directory; None renders the synthetic space in memory
    cardinalities: tuple[int, ...] = DEFAULT_CARDINALITIES
    image_size: int = DEFAULT_IMAGE_SIZE
    n_eval: int = DEFAULT_N_EVAL
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        self.cardinalities = tuple(int(c) for c in self.cardinalities)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.n_eval < 2:
            raise ConfigError("n_eval must be >= 2")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _strict_keys(d, {f.name for f in fields(cls)}, "run config")
        d = dict(d)
        try:
            d["train"] = TrainConfig.from_dict(d.get("train", {}))
        except KeyError as exc:
            raise ConfigError(exc.args[0]) from exc
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "train": self.train.to_dict(),
            "dataset": self.dataset,
            "cardinalities": list(self.cardinalities),
            "image_size": self.image_size,
            "n_eval": self.n_eval,
            "seeds": list(self.seeds),
        }

    def train_config(self, seed: int, n_sources: int) -> TrainConfig:
        cfg = copy.copy(self.train)
        cfg.seed = int(seed)
        return cfg.resolved(n_sources)

    def load_data(self) -> Dataset:
        if self.dataset is not None:
            path = Path(self.dataset)
            if not path.exists():
                raise ConfigError(f"dataset directory {path} does not exist")
            return load_dataset(path)
        return build_dataset(SourceSpace(self.cardinalities), self.image_size)


@dataclass
class SweepSpec:
    base: RunConfig
    axis: str
    values: list

    def __post_init__(self):
        if not self.values:
            raise ConfigError("sweep values must be nonempty")
        if self.axis not in {f.name for f in fields(TrainConfig)}:
            raise ConfigError(f"sweep axis {self.axis!r} is not a training option")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        _strict_keys(d, {"base", "axis", "values"}, "sweep")
        for key in ("base", "axis", "values"):
            if key not in d:
                raise ConfigError(f"sweep config missing {key!r}")
        return cls(RunConfig.from_dict(d["base"]), d["axis"], list(d["values"]))

    def cell(self, value) -> RunConfig:
        run = copy.deepcopy(self.base)
        setattr(run.train, self.axis, value)
        run.train.__post_init__()
        return run


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


# --- evaluation -------------------------------------------------------------------


@dataclass
class Evaluation:
    metrics: dict
    report: NmiReport
    sample: EvalSample


def draw_eval_rows(dataset: Dataset, n_eval: int, seed: int) -> np.ndarray:
    """I.i.d. row indices with replacement; one re-draw if a source comes out constant."""
    rng = RngStream(seed, _STREAM_EVAL)
    for _ in range(2):
        idx = rng.choice(len(dataset), n_eval)
        src = dataset.sources[idx]
        if np.all(src.max(axis=0) > src.min(axis=0)):
            return idx
    raise ConstantSourceError("a source column stayed constant after re-drawing the evaluation sample")


def eval_sample(state: ModelState, dataset: Dataset, idx: np.ndarray) -> EvalSample:
    """Code indices for quantized models, continuous encoder outputs otherwise."""
    emb = embed(state, dataset.flat_images()[idx].astype(state.config.dtype))
    if state.quantized:
        return EvalSample(dataset.sources[idx], emb.indices, DISCRETE, dataset.space.names)
    return EvalSample(dataset.sources[idx], emb.z_c, CONTINUOUS, dataset.space.names)


def evaluate_model(state: ModelState, dataset: Dataset, n_eval: int = DEFAULT_N_EVAL, seed: int | None = None) -> Evaluation:
    seed = state.config.seed if seed is None else seed
    idx = draw_eval_rows(dataset, n_eval, seed)
    sample = eval_sample(state, dataset, idx)
    result = infomec(sample)
    images = dataset.images[idx]
    recon = reconstruct(state, images.astype(state.config.dtype))
    mse = float(np.mean((recon.astype(np.float64) - images.astype(np.float64)) ** 2))
    metrics = {
        "infom": result.infom,
        "infoe": result.infoe,
        "infoc": result.infoc,
        # PSNR of the mean squared error pooled over the evaluation sample
        "psnr_mean": math.inf if mse == 0 else 10 * math.log10(1 / mse),
        "n_active": result.report.n_active,
        "seed": int(seed),
        "config_hash": state.config.hash(),
    }
    return Evaluation(metrics, result.report, sample)


def write_metrics(metrics: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return path


def write_nmi_csv(report: NmiReport, path, source_names) -> Path:
    path = Path(path)
    n_z = report.nmi.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source"] + [f"z{j}" for j in range(n_z)])
        for name, row in zip(source_names, report.nmi):
            w.writerow([name] + [repr(float(v)) for v in row])
        w.writerow(["active"] + [int(a) for a in report.active_mask])
    return path


def read_nmi_csv(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body, mask = rows[1:-1], rows[-1]
    names = [r[0] for r in body]
    nmi = np.array([[float(v) for v in r[1:]] for r in body])
    return nmi, np.array([int(v) for v in mask[1:]], dtype=bool), names


# --- runs -------------------------------------------------------------------------


def run_seed(run: RunConfig, seed: int, out_dir, dataset: Dataset | None = None) -> dict:
    """Train one seed, evaluate it, and write every artifact under ``out_dir``."""
    dataset = dataset if dataset is not None else run.load_data()
    out_dir = Path(out_dir)
    start = time.perf_counter()
    cfg = run.train_config(seed, dataset.space.n_sources)
    state = train(cfg, dataset, out_dir)
    ev = evaluate_model(state, dataset, run.n_eval, seed)
    write_metrics(ev.metrics, out_dir / "metrics.json")
    write_nmi_csv(ev.report, out_dir / "nmi.csv", dataset.space.names)
    log.info("seed %d done in %.1fs: %s", seed, time.perf_counter() - start, ev.metrics)
    return ev.metrics


def run_seeds(run: RunConfig, out_dir, dataset: Dataset | None = None) -> list[dict]:
    dataset = dataset if dataset is not None else run.load_data()
    return [run_seed(run, s, Path(out_dir) / f"seed-{s}", dataset) for s in run.seeds]


def _cell_dir(out_dir: Path, axis: str, value, seed: int) -> Path:
    return out_dir / f"{axis}={value}" / f"seed-{seed}"


def _run_cell(args) -> dict:
    spec, value, seed, out_dir = args
    row = {"value": value, "seed": seed}
    try:
        metrics = run_seed(spec.cell(value), seed, _cell_dir(out_dir, spec.axis, value, seed))
        row.update(status="ok", infom=metrics["infom"], infoe=metrics["infoe"], infoc=metrics["infoc"], psnr=metrics["psnr_mean"])
    except Exception as exc:  # noqa: BLE001  cells are isolated by contract
        log.warning("cell %s=%s seed %d failed: %s", spec.axis, value, seed, exc)
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}", infom=math.nan, infoe=math.nan, infoc=math.nan, psnr=math.nan)
    return row


@dataclass
class SweepResult:
    axis: str
    rows: list[dict]
    best_value: object
    best_median_infom: float

    def medians(self) -> dict:
        out = {}
        for r in self.rows:
            if r["status"] == "ok":
                out.setdefault(r["value"], []).append(r["infom"])
        return {v: statistics.median(x) for v, x in out.items()}


def run_sweep(spec: SweepSpec, out_dir, workers: int = 1) -> SweepResult:
    """Train and evaluate every (value, seed) cell; pick the value with best median InfoM.

    Ties in the median go to the earlier value in ``spec.values``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(spec, v, s, out_dir) for v in spec.values for s in spec.base.seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]

    result = SweepResult(spec.axis, rows, None, math.nan)
    medians = result.medians()
    for v in spec.values:
        if v in medians and not medians[v] <= result.best_median_infom:
            result.best_value, result.best_median_infom = v, medians[v]
    write_sweep(result, out_dir)
    return result


def write_sweep(result: SweepResult, out_dir: Path):
    ordered = sorted(result.rows, key=lambda r: (r["status"] != "ok", -r["infom"] if r["status"] == "ok" else 0))
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([result.axis, "seed", "infom", "infoe", "infoc", "psnr", "status"])
        for r in ordered:
            w.writerow([r["value"], r["seed"]] + [repr(float(r[k])) for k in ("infom", "infoe", "infoc", "psnr")] + [r["status"]])
    best = {
        "axis": result.axis,
        "best_value": result.best_value,
        "best_median_infom": result.best_median_infom,
        "failed": [{"value": r["value"], "seed": r["seed"], "error": r["error"]} for r in result.rows if r["status"] != "ok"],
    }
    (out_dir / "best.json").write_text(json.dumps(best, indent=2) + "\n")


@dataclass
class ProtocolResult:
    sweep: SweepResult
    final: list[dict]  # metrics for every final seed at the selected value

    def median(self, key: str) -> float:
        return statistics.median(m[key] for m in self.final)


def select_and_replicate(spec: SweepSpec, final_seeds, out_dir) -> ProtocolResult:
    """Sweep on ``spec.base.seeds``, then report the best value over ``final_seeds``.

    Seeds already trained during selection are reused rather than retrained.
    """
    out_dir = Path(out_dir)
    sweep = run_sweep(spec, out_dir)
    if sweep.best_value is None:
        raise RuntimeError("every sweep cell failed")
    run = spec.cell(sweep.best_value)
    dataset = run.load_data()
    done = {r["seed"]: r for r in sweep.rows if r["value"] == sweep.best_value and r["status"] == "ok"}
    final = []
    for s in final_seeds:
        cell = _cell_dir(out_dir, spec.axis, sweep.best_value, s)
        if s in done:
            final.append(json.loads((cell / "metrics.json").read_text()))
        else:
            final.append(run_seed(run, s, cell, dataset))
    return ProtocolResult(sweep, final)


def load_state(path) -> ModelState:
    """Accept either a checkpoint directory or a seed directory containing one."""
    path = Path(path)
    if (path / "checkpoint" / "meta.json").exists():
        path = path / "checkpoint"
    if not (path / "meta.json").exists():
        raise ConfigError(f"no checkpoint found at {path}")
    return load_checkpoint(path)
