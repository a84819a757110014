"""Experiment harness: train, sample, eval, mcmc, and landscape subcommands.

Every emitted artifact embeds the resolved configuration hash and the seed,
so re-running a subcommand with identical inputs reproduces it bitwise.
Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import datasets as ds
from . import evaluation as ev
from . import experiments as ex
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ExperimentConfig,
    config_from_pairs,
    config_hash,
    config_to_text,
    load_config,
    parse_config_text,
    parse_overrides,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DegeneracyError,
    NonFiniteError,
    SolverError,
    TrainingAbortError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _resolve_config(args) -> ExperimentConfig:
    overrides = parse_overrides(args.override or [])
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.config is not None:
        cfg = load_config(args.config, overrides)
    else:
        cfg = config_from_pairs({}, overrides)
    return cfg


def _artifact_header(cfg: ExperimentConfig, extra: dict | None = None) -> list[str]:
    lines = [f"config_hash: {config_hash(cfg)}", f"seed: {cfg.seed}"]
    for key, value in (extra or {}).items():
        lines.append(f"{key}: {value}")
    return lines


def _write_csv(path, header_lines: list[str], schema: list[str], rows) -> None:
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write(f"# schema: {','.join(schema)}\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
            fh.write("\n")


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _load_model_from_checkpoint(path, cfg: ExperimentConfig | None = None):
    data = load_checkpoint(path)
    stored_cfg = config_from_pairs(parse_config_text(data.config_text))
    if cfg is not None and (
        stored_cfg.variant != cfg.variant
        or stored_cfg.dataset != cfg.dataset
        or stored_cfg.manifold_dim != cfg.manifold_dim
    ):
        raise ConfigError(
            f"checkpoint was trained as {stored_cfg.variant!r} on "
            f"{stored_cfg.dataset!r} (n={stored_cfg.manifold_dim}); the given "
            f"config asks for {cfg.variant!r} on {cfg.dataset!r} (n={cfg.manifold_dim})"
        )
    model = ex.build_model(stored_cfg, np.random.default_rng(stored_cfg.seed))
    model.params.restore(data.arrays)
    return model, stored_cfg, data


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, log, bundle = ex.run_training(cfg)
    ckpt_path = out / "checkpoint.bin"
    save_checkpoint(
        ckpt_path, config_to_text(cfg), model.params, stats=bundle.stats,
        rng=np.random.default_rng(cfg.seed),
    )
    rows = [
        (r.epoch, r.phase, r.train_loss, r.val_loss, r.snapshot_id)
        for r in log.records
    ]
    _write_csv(
        out / "losses.csv",
        _artifact_header(cfg, {"restored_epoch": log.restored_epoch}),
        ["epoch", "phase", "train_loss", "val_loss", "snapshot_id"],
        rows,
    )
    print(f"wrote {ckpt_path} and {out / 'losses.csv'} (best epoch {log.restored_epoch})")
    return EXIT_OK


def cmd_sample(args) -> int:
    model, cfg, _ = _load_model_from_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else cfg.seed
    rng = np.random.default_rng(seed)
    theta = args.theta if cfg.conditional else None
    x = model.sample(args.count, rng, context=theta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _artifact_header(cfg, {"checkpoint": _file_hash(args.checkpoint)})
    header[1] = f"seed: {seed}"
    ds.save_samples_csv(out / "samples.csv", x, header_lines=header)
    print(f"wrote {out / 'samples.csv'} ({args.count} samples)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    model, _, _ = _load_model_from_checkpoint(args.checkpoint, cfg)
    report = ex.evaluate_model(cfg, model, checkpoint_id=_file_hash(args.checkpoint))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.notes["config_hash"] = config_hash(cfg)
    report.save(out / "report.txt")
    header, row = report.to_csv_row()
    _write_csv(out / "report.csv", _artifact_header(cfg), header.split(","), [row.split(",")])
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_mcmc(args) -> int:
    cfg = _resolve_config(args)
    model, _, _ = _load_model_from_checkpoint(args.checkpoint, cfg)
    rng = np.random.default_rng(cfg.seed + 7)
    model_chain, true_chain, obs = ex.run_posterior_mcmc(cfg, model, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _artifact_header(cfg, {"checkpoint": _file_hash(args.checkpoint)})
    _write_csv(
        out / "chain.csv", header, ["theta0"],
        [(float(t),) for t in model_chain.samples[:, 0]],
    )
    _write_csv(
        out / "chain_true.csv", header, ["theta0"],
        [(float(t),) for t in true_chain.samples[:, 0]],
    )
    bw = ev.median_heuristic_bandwidth(model_chain.samples, true_chain.samples)
    report = ev.MetricReport(
        dataset=cfg.dataset, checkpoint=_file_hash(args.checkpoint), seed=cfg.seed,
        metrics={
            "posterior_mmd": ev.mmd(model_chain.samples, true_chain.samples, bw),
            "acceptance_rate": model_chain.acceptance_rate,
            "kde_log_posterior_at_star": ev.kde_log_posterior(
                model_chain.samples, np.array([0.0]), cfg.kde_bandwidth
            ),
        },
        notes={"config_hash": config_hash(cfg)},
    )
    report.save(out / "posterior.txt")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_landscape(args) -> int:
    cfg = _resolve_config(args)
    rng = np.random.default_rng(cfg.seed)
    data = ds.sample_line(cfg.landscape_data_size, rng)
    alphas = np.linspace(
        cfg.landscape_alpha_min, cfg.landscape_alpha_max, cfg.landscape_resolution
    )
    sigmas = np.linspace(
        cfg.landscape_sigma_min, cfg.landscape_sigma_max, cfg.landscape_resolution
    )
    grid = ds.line_landscape(data, alphas, sigmas, cfg.landscape_combined_weight)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "landscape.csv",
        _artifact_header(cfg),
        ["alpha", "sigma", "naive_loglik", "recon", "combined"],
        [tuple(float(v) for v in row) for row in grid],
    )
    print(f"wrote {out / 'landscape.csv'} ({len(grid)} grid points)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maniflow",
        description="Manifold-learning normalizing flow experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_checkpoint=False):
        p.add_argument("--config", type=str, default=None, help="config file path")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--out", type=str, default="out", help="output directory")
        p.add_argument(
            "--override", action="append", metavar="KEY=VALUE",
            help="override a config key (repeatable)",
        )
        if needs_checkpoint:
            p.add_argument("--checkpoint", type=str, required=True)

    common(sub.add_parser("train", help="train a model and write a checkpoint"))
    p_sample = sub.add_parser("sample", help="draw samples from a checkpoint")
    common(p_sample, needs_checkpoint=True)
    p_sample.add_argument("--count", type=int, default=1000)
    p_sample.add_argument("--theta", type=float, default=0.0)
    common(sub.add_parser("eval", help="compute metric reports"), needs_checkpoint=True)
    common(sub.add_parser("mcmc", help="posterior sampling on the surface task"),
           needs_checkpoint=True)
    common(sub.add_parser("landscape", help="emit the tilted-line loss landscape"))
    return parser


_COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "mcmc": cmd_mcmc,
    "landscape": cmd_landscape,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, CheckpointError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAbortError, NonFiniteError, DegeneracyError, SolverError) as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
