"""Command-line entry points.

Every command accepts ``--config`` (JSON), ``--seed`` and ``--out``. On
success a JSON summary goes to stdout and the exit code is 0; on failure a
JSON object ``{"error", "message", "command"}`` goes to stderr and the exit
code is 1 (2 for argument errors).

::

    qlae generate-data --out data/ [--config space.json]
    qlae train        --config run.json --out runs/ [--seed 3]
    qlae evaluate     --checkpoint runs/seed-0 --out eval/ [--config run.json]
    qlae sweep        --config sweep.json --out sweep/
    qlae traverse     --checkpoint runs/seed-0 --index 5 --dim 2 --steps 8 --out frames/
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .experiment import (
    ConfigError,
    RunConfig,
    SweepSpec,
    evaluate_model,
    load_state,
    read_json,
    run_seeds,
    run_sweep,
    write_metrics,
    write_nmi_csv,
)
from .autoencoder import latent_traversal
from .world import DEFAULT_CARDINALITIES, DEFAULT_IMAGE_SIZE, SourceSpace, build_dataset, load_dataset, save_dataset


class CliError(RuntimeError):
    pass


def _run_config(args) -> RunConfig:
    run = RunConfig.from_dict(read_json(args.config)) if args.config else RunConfig()
    if args.seed is not None:
        run.seeds = (args.seed,)
    return run


def _dataset(args, run: RunConfig | None = None):
    if getattr(args, "dataset", None):
        return load_dataset(args.dataset)
    return (run or RunConfig()).load_data()


def cmd_generate_data(args) -> dict:
    spec = read_json(args.config) if args.config else {}
    unknown = sorted(set(spec) - {"cardinalities", "names", "image_size"})
    if unknown:
        raise ConfigError(f"unknown space keys {unknown}; valid keys are ['cardinalities', 'image_size', 'names']")
    space = SourceSpace(tuple(spec.get("cardinalities", DEFAULT_CARDINALITIES)), tuple(spec.get("names", ())))
    d = build_dataset(space, int(spec.get("image_size", DEFAULT_IMAGE_SIZE)))
    save_dataset(d, args.out)
    return {"out": str(args.out), "N": len(d), "n_s": space.n_sources, "cardinalities": list(space.cardinalities)}


def cmd_train(args) -> dict:
    run = _run_config(args)
    metrics = run_seeds(run, args.out)
    return {"out": str(args.out), "seeds": list(run.seeds), "metrics": metrics}


def cmd_evaluate(args) -> dict:
    state = load_state(args.checkpoint)
    run = RunConfig.from_dict(read_json(args.config)) if args.config else None
    seed = args.seed if args.seed is not None else state.config.seed
    if run is not None:
        expected = run.train_config(seed, len(run.cardinalities) if run.dataset is None else load_dataset(run.dataset).space.n_sources).hash()
        if expected != state.config.hash():
            raise CliError(f"checkpoint config_hash {state.config.hash()} does not match the supplied config ({expected})")
    dataset = _dataset(args, run)
    n_eval = args.n_eval or (run.n_eval if run else 10_000)
    ev = evaluate_model(state, dataset, n_eval, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(ev.metrics, out / "metrics.json")
    write_nmi_csv(ev.report, out / "nmi.csv", dataset.space.names)
    return ev.metrics


def cmd_sweep(args) -> dict:
    spec = SweepSpec.from_dict(read_json(args.config))
    if args.seed is not None:
        spec.base.seeds = (args.seed,)
    result = run_sweep(spec, args.out, workers=args.workers)
    return {
        "out": str(args.out),
        "axis": result.axis,
        "best_value": result.best_value,
        "best_median_infom": result.best_median_infom,
        "failed": sum(r["status"] != "ok" for r in result.rows),
    }


def cmd_traverse(args) -> dict:
    state = load_state(args.checkpoint)
    run = RunConfig.from_dict(read_json(args.config)) if args.config else None
    dataset = _dataset(args, run)
    if not 0 <= args.index < len(dataset):
        raise CliError(f"image index {args.index} out of range for {len(dataset)} images")
    images = dataset.images.astype(state.config.dtype)
    frames, meta = latent_traversal(state, images[args.index], args.dim, args.steps, eval_images=images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pixels = np.rint(frames * 255).astype(np.uint8)
    for i, f in enumerate(pixels):
        f.tofile(out / f"frame-{i:03d}.rgb")
    h, w, _ = frames.shape[1:]
    meta.update(index=args.index, height=h, width=w, channels=3, seed=state.config.seed, config_hash=state.config.hash())
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return meta


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qlae", description="Quantized latent autoencoder experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, out_required=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed(s)")
        p.add_argument("--out", type=Path, required=out_required, help="output directory")
        p.set_defaults(func=func)
        return p

    add("generate-data", cmd_generate_data, "render the synthetic dataset to a directory")
    add("train", cmd_train, "train one model per seed")
    p = add("evaluate", cmd_evaluate, "compute InfoMEC and PSNR for a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--n-eval", type=int)
    p = add("sweep", cmd_sweep, "train and evaluate a hyperparameter grid")
    p.add_argument("--workers", type=int, default=1)
    p = add("traverse", cmd_traverse, "decode a sweep of one latent dimension")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--steps", type=int, default=8)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            print(json.dumps({"error": "UsageError", "message": "invalid arguments", "command": None}), file=sys.stderr)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001  reported as machine-readable JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        return 1
    print(json.dumps(result, default=_jsonable))
    return 0


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


if __name__ == "__main__":
    sys.exit(main())
