"""Command-line front end for reproducible experiments.

Subcommands: ``generate`` (write the synthetic benchmark), ``pretrain``
(train and freeze a backbone), ``run`` (one continual run), ``report``
(aggregate FAA/CAA across run directories) and ``sweep`` (loss-weight and
pool-size grids). All randomness derives from the config seed; any
contract or format violation exits nonzero with a one-line diagnostic.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .backbone import pretrain_backbone
from .checkpoint import load_backbone, save_backbone
from .config import ExperimentConfig, load_config, write_snapshot
from .data import generate_benchmark, read_benchmark, write_benchmark
from .errors import VQPromptError
from .metrics import read_final_metrics
from .training import run_continual


def _load(args, mode_override=None) -> ExperimentConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = str(args.seed)
    if mode_override is not None:
        overrides["train.mode"] = mode_override
    return load_config(args.config, overrides)


def _generate_from_config(cfg: ExperimentConfig):
    return generate_benchmark(
        cfg.train.seed,
        tasks=cfg.data.tasks,
        classes_per_task=cfg.data.classes_per_task,
        samples_per_class=cfg.data.samples_per_class,
        noise_scale=cfg.data.noise_scale,
        pretrain_classes=cfg.data.pretrain_classes,
        pretrain_samples_per_class=cfg.data.pretrain_samples_per_class,
        tokens_per_sample=cfg.data.tokens_per_sample,
        token_dim=cfg.data.token_dim,
    )


def cmd_generate(args) -> int:
    cfg = _load(args)
    pretrain, sequence = _generate_from_config(cfg)
    write_benchmark(args.out, pretrain, sequence)
    write_snapshot(Path(args.out) / "config.ini", cfg)
    print(
        f"wrote {sequence.num_tasks} tasks "
        f"({sequence.num_classes} classes) plus pretraining data to {args.out}"
    )
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    pretrain, _ = read_benchmark(args.data)
    backbone, accuracy = pretrain_backbone(
        pretrain.train,
        cfg.backbone_config(),
        cfg.backbone.pretrain_epochs,
        eval_set=pretrain.test,
        lr=cfg.backbone.pretrain_lr,
        batch_size=cfg.backbone.pretrain_batch_size,
        seed=cfg.train.seed,
    )
    save_backbone(args.out, backbone, extra_header={"pretrain_accuracy": accuracy})
    print(f"pretrained backbone frozen at {args.out}; held-out accuracy {accuracy:.4f}")
    return 0


def cmd_run(args) -> int:
    cfg = _load(args, mode_override=args.mode)
    _, sequence = read_benchmark(args.data)
    backbone, _, _ = load_backbone(args.backbone)
    out_dir = Path(args.out)
    result = run_continual(
        backbone,
        sequence,
        cfg.train_config(),
        pool_size=cfg.prompt.pool_size,
        prompt_length=cfg.prompt.prompt_length,
        out_dir=out_dir,
    )
    write_snapshot(out_dir / "config.ini", cfg)
    print(
        f"mode={cfg.train.mode} seed={cfg.train.seed} "
        f"FAA={result.faa:.4f} CAA={result.caa:.4f} -> {out_dir}"
    )
    return 0


def cmd_report(args) -> int:
    rows: dict[str, list[tuple[float, float]]] = {}
    for run_dir in args.runs:
        run_dir = Path(run_dir)
        cfg = load_config(run_dir / "config.ini")
        final_faa, final_caa = read_final_metrics(run_dir / "metrics.csv")
        rows.setdefault(cfg.train.mode, []).append((final_faa, final_caa))
    lines = ["mode,runs,faa_mean,faa_std,caa_mean,caa_std"]
    print(f"{'mode':8} {'runs':>4} {'FAA':>18} {'CAA':>18}")
    for mode in sorted(rows):
        values = np.asarray(rows[mode])
        faa_mean, caa_mean = (float(v) for v in values.mean(axis=0))
        faa_std, caa_std = (float(v) for v in values.std(axis=0))
        lines.append(
            f"{mode},{len(values)},{faa_mean!r},{faa_std!r},{caa_mean!r},{caa_std!r}"
        )
        print(
            f"{mode:8} {len(values):>4} "
            f"{100 * faa_mean:8.2f} +- {100 * faa_std:5.2f} "
            f"{100 * caa_mean:8.2f} +- {100 * caa_std:5.2f}"
        )
    if args.out:
        Path(args.out).write_text("".join(line + "\n" for line in lines))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    _, sequence = read_benchmark(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def _one_run(train_cfg, pool_size, prompt_length):
        backbone, _, _ = load_backbone(args.backbone)
        result = run_continual(
            backbone, sequence, train_cfg,
            pool_size=pool_size, prompt_length=prompt_length,
        )
        return result.faa, result.caa

    weight_lines = ["lambda_q,lambda_c,faa,caa"]
    for lambda_q in cfg.ablation.lambda_q_grid:
        for lambda_c in cfg.ablation.lambda_c_grid:
            train_cfg = cfg.train_config()
            train_cfg.weights.lambda_q = lambda_q
            train_cfg.weights.lambda_c = lambda_c
            run_faa, run_caa = _one_run(
                train_cfg, cfg.prompt.pool_size, cfg.prompt.prompt_length
            )
            weight_lines.append(f"{lambda_q!r},{lambda_c!r},{run_faa!r},{run_caa!r}")
            print(f"lambda_q={lambda_q} lambda_c={lambda_c} FAA={run_faa:.4f}")
    (out_dir / "sweep_loss_weights.csv").write_text(
        "".join(line + "\n" for line in weight_lines)
    )

    size_lines = ["pool_size,prompt_length,faa,caa"]
    for pool_size in cfg.ablation.pool_size_grid:
        for prompt_length in cfg.ablation.prompt_length_grid:
            run_faa, run_caa = _one_run(cfg.train_config(), pool_size, prompt_length)
            size_lines.append(
                f"{pool_size},{prompt_length},{run_faa!r},{run_caa!r}"
            )
            print(
                f"pool_size={pool_size} prompt_length={prompt_length} "
                f"FAA={run_faa:.4f}"
            )
    (out_dir / "sweep_prompt_size.csv").write_text(
        "".join(line + "\n" for line in size_lines)
    )
    write_snapshot(out_dir / "config.ini", cfg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vqprompt",
        description="Vector-quantized prompt selection for class-incremental learning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def _common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", default=None, help="INI config file")
            p.add_argument("--seed", type=int, default=None, help="override train.seed")

    p = sub.add_parser("generate", help="write the synthetic benchmark")
    _common(p)
    p.add_argument("--out", required=True, help="output data directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="pretrain and freeze the backbone")
    _common(p)
    p.add_argument("--data", required=True, help="benchmark directory")
    p.add_argument("--out", required=True, help="backbone checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="execute one continual run")
    _common(p)
    p.add_argument("--data", required=True, help="benchmark directory")
    p.add_argument("--backbone", required=True, help="frozen backbone checkpoint")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument(
        "--mode", choices=("vq", "vq-s", "soft", "none"), default=None,
        help="override train.mode (vq-s disables classifier calibration)",
    )
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="aggregate FAA/CAA over run directories")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", default=None, help="optional CSV output path")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="loss-weight and pool-size grids")
    _common(p)
    p.add_argument("--data", required=True, help="benchmark directory")
    p.add_argument("--backbone", required=True, help="frozen backbone checkpoint")
    p.add_argument("--out", required=True, help="sweep output directory")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (VQPromptError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
