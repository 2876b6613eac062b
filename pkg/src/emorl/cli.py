"""Command-line entry points: gen-data, train, eval, traverse, activeness,
bench, check. Every command takes --config plus optional --set overrides;
errors exit nonzero with a single machine-parsable line on stderr."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation, visualize
from .config import ConfigError, RunConfig, config_hash, load_config
from .data.format import DatasetError, DatasetReader, generate_dataset, split_dataset
from .data.generate import GenerationError
from .model import EfficientMorl
from .trainer import (
    CheckpointError,
    TrainingDiverged,
    load_checkpoint,
    open_train_view,
    train,
)

KNOWN_ERRORS = (
    ConfigError,
    DatasetError,
    GenerationError,
    CheckpointError,
    TrainingDiverged,
)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="emorl",
        description="Object-centric scene decomposition: data, training, evaluation.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override a config value (dotted key, JSON value)",
        )
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("gen-data", help="generate the scene dataset file")
    common(sp)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--resume", default=None, help="checkpoint to resume from")
    sp.add_argument("--max-steps", type=int, default=None)

    for name, extra_help in (
        ("eval", "segmentation metrics + decomposition grids"),
        ("traverse", "latent traversal grids"),
        ("activeness", "per-dimension activeness scores"),
        ("bench", "forward/backward timing table"),
        ("check", "structural property checks"),
    ):
        sp = sub.add_parser(name, help=extra_help)
        common(sp)
        sp.add_argument("--checkpoint", default=None, help="checkpoint path")
        sp.add_argument(
            "--I", default=None,
            help="refinement steps at test time (int or comma list)",
        )
        sp.add_argument("--K", type=int, default=None, help="slot-count override")
    return p


def _load(args) -> RunConfig:
    return load_config(args.config, args.set)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(args, cfg: RunConfig) -> tuple[EfficientMorl, int]:
    ckpt = args.checkpoint
    if ckpt is None:
        ckpt = Path(cfg.out_dir) / "checkpoint_final.pt"
    state = load_checkpoint(ckpt, cfg)
    state.model.eval()
    return state.model, state.step


def _steps_list(args, cfg: RunConfig) -> list[int]:
    if args.I is None:
        return [cfg.eval.steps]
    return [int(s) for s in str(args.I).split(",") if s != ""]


def _test_view(cfg: RunConfig):
    if cfg.eval.dataset:
        reader = DatasetReader(cfg.eval.dataset)
        n = min(cfg.eval.n_scenes, len(reader))
        _, view = split_dataset(reader, 0, n)
        return view
    _, test = open_train_view(cfg)
    return test


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    if args.seed is not None:
        cfg.data.seed = args.seed
    path = Path(cfg.data.path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = generate_dataset(cfg.data.generator, cfg.data.n_scenes, cfg.data.seed, path)
    print(f"wrote {n} scenes to {path} (preset={cfg.data.generator.name}, "
          f"seed={cfg.data.seed})")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = _out_dir(args, cfg)

    def echo(rec):
        print(json.dumps(rec))

    state = train(cfg, out_dir=out, resume=args.resume,
                  max_steps=args.max_steps, log_fn=echo)
    print(f"finished at step {state.step}; checkpoints in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    model, step = _load_model(args, cfg)
    out = _out_dir(args, cfg)
    seed = args.seed if args.seed is not None else cfg.eval.seed
    k = args.K if args.K is not None else cfg.eval.num_slots
    view = _test_view(cfg)
    lines = [
        f"config_hash={config_hash(cfg)}",
        f"checkpoint_step={step}",
        f"dataset={cfg.eval.dataset or cfg.data.path}",
    ]
    for steps in _steps_list(args, cfg):
        summary = evaluation.evaluate_segmentation(
            model, view, steps=steps, num_slots=k,
            batch_size=cfg.eval.batch_size, seed=seed,
            max_scenes=cfg.eval.n_scenes,
        )
        lines.append(
            f"I={steps} ari={summary.ari_mean:.4f} mse={summary.mse_mean:.6f} "
            f"n={summary.n_scenes} skipped={summary.n_skipped} K={summary.num_slots}"
        )
        grid = visualize.decomposition_grid(
            model, [view[i] for i in range(min(8, len(view)))],
            steps=steps, num_slots=k, seed=seed,
        )
        visualize.save_png(grid, out / f"decomposition_I{steps}.png")
    report = "\n".join(lines) + "\n"
    (out / "eval_report.txt").write_text(report)
    print(report, end="")
    return 0


def cmd_traverse(args) -> int:
    cfg = _load(args)
    model, _ = _load_model(args, cfg)
    out = _out_dir(args, cfg)
    seed = args.seed if args.seed is not None else cfg.eval.seed
    steps = _steps_list(args, cfg)[0]
    view = _test_view(cfg)
    means, _ = evaluation.posterior_means(
        model, view, steps=steps, n_scenes=min(100, len(view)),
        batch_size=cfg.eval.batch_size, seed=seed,
    )
    ranges = evaluation.traversal_ranges(means)
    rng = np.random.default_rng(seed)
    slot = int(rng.integers(means.shape[1]))
    dims = list(range(means.shape[2]))
    grid = visualize.traversal_grid(model, means[0], slot, dims, ranges)
    visualize.save_png(grid, out / "traversal.png")
    np.savetxt(
        out / "traversal_ranges.txt", ranges, fmt="%.5f",
        header=f"config_hash={config_hash(cfg)} slot={slot}",
    )
    print(f"wrote {out / 'traversal.png'} (slot {slot}, {len(dims)} dims)")
    return 0


def cmd_activeness(args) -> int:
    cfg = _load(args)
    model, _ = _load_model(args, cfg)
    out = _out_dir(args, cfg)
    seed = args.seed if args.seed is not None else cfg.eval.seed
    steps = _steps_list(args, cfg)[0]
    view = _test_view(cfg)
    scores = evaluation.activeness(
        model, view, n_scenes=min(100, len(view)), steps=steps, seed=seed,
        batch_size=cfg.eval.batch_size,
    )
    visualize.save_png(visualize.activeness_map(scores), out / "activeness.png")
    lines = [f"config_hash={config_hash(cfg)}"]
    lines += [f"dim={i} activeness={v:.8f}" for i, v in enumerate(scores)]
    (out / "activeness.txt").write_text("\n".join(lines) + "\n")
    print(f"active dims (>1% of max): {int((scores > 0.01 * scores.max()).sum())}"
          f" of {scores.size}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load(args)
    model, _ = _load_model(args, cfg)
    out = _out_dir(args, cfg)
    steps = _steps_list(args, cfg)
    if args.I is None:
        steps = [0, 1, 3]
    report = evaluation.bench(model, steps_list=tuple(steps), passes=20)
    lines = [
        f"config_hash={config_hash(cfg)}",
        f"batch_size={report.batch_size}",
        f"image_size={report.image_size[0]}x{report.image_size[1]}",
        f"passes={report.passes}",
        f"parameters={report.num_parameters}",
    ]
    for row in report.rows:
        lines.append(
            f"I={row.steps} forward_s={row.forward_s:.5f} "
            f"forward_backward_s={row.forward_backward_s:.5f}"
        )
    text = "\n".join(lines) + "\n"
    (out / "bench.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_check(args) -> int:
    cfg = _load(args)
    model, _ = _load_model(args, cfg)
    out = _out_dir(args, cfg)
    checks = evaluation.run_property_checks(
        model, seed=args.seed if args.seed is not None else 0
    )
    lines = [f"config_hash={config_hash(cfg)}"]
    ok = True
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        ok = ok and c.passed
        lines.append(
            f"{status} {c.name} max_deviation={c.max_deviation:.3e} "
            f"tolerance={c.tolerance:.0e}"
        )
    text = "\n".join(lines) + "\n"
    (out / "property_checks.txt").write_text(text)
    print(text, end="")
    return 0 if ok else 1


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "traverse": cmd_traverse,
    "activeness": cmd_activeness,
    "bench": cmd_bench,
    "check": cmd_check,
}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except KNOWN_ERRORS as e:
        print(f"error[{type(e).__name__}]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
