"""Command-line entry point.

Subcommands: synth-data, pretrain, train, eval, report. Each run is
driven by one YAML config file; command-line flags override individual
fields. Exit codes: 0 success, 1 runtime failure, 2 usage or config
error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import attacks, data, evaluation, losses, nnkit, training
from .errors import CiardError, ConfigError, FormatError, ParameterError

USAGE_ERRORS = (ConfigError, ParameterError, FormatError)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    return cfg


def _out_dir(cfg: dict) -> Path:
    base = cfg.get("output_dir") or os.environ.get("CIARD_OUT", ".")
    return Path(base)


def _require_seed(cfg: dict, args) -> int:
    seed = args.seed if getattr(args, "seed", None) is not None else cfg.get("seed")
    if seed is None:
        raise ConfigError("a seed is mandatory (config key 'seed' or --seed)")
    return int(seed)


def _model_spec(cfg: dict, dataset: data.Dataset) -> nnkit.ModelSpec:
    m = cfg.get("model", {})
    return nnkit.ModelSpec(
        arch=m.get("arch", "mlp"),
        input_shape=tuple(m.get("input_shape", dataset.xs.shape[1:])),
        num_classes=int(m.get("num_classes", dataset.num_classes)),
        hidden=tuple(m.get("hidden", (64, 64))),
        channels=tuple(m.get("channels", (16, 32))),
    )


def _attack_config(cfg: dict, seed: int) -> attacks.AttackConfig:
    a = cfg.get("attack", {})
    return attacks.AttackConfig(
        epsilon=float(a.get("epsilon", 8 / 255)),
        step=float(a.get("step", 2 / 255)),
        iters=int(a.get("iters", 10)),
        objective=attacks.Objective(a.get("objective", "ce_label")),
        rand_init=bool(a.get("rand_init", True)),
        kappa=float(a.get("kappa", 0.0)),
        query_budget=int(a.get("query_budget", 100)),
        seed=seed,
    )


def _train_config(cfg: dict, seed: int, args=None) -> training.TrainConfig:
    t = cfg.get("train", {})
    w = cfg.get("weights", {})
    weights = losses.LossWeights(
        w_nat=float(w.get("w_nat", 0.5)),
        lambda_push=float(w.get("lambda_push", 1.0)),
        eta=float(w.get("eta", 0.025)),
        tau_push=float(w.get("tau_push", 4.0)),
        tau_kd=float(w.get("tau_kd", 1.0)),
        scale_by_tau2=bool(w.get("scale_by_tau2", True)),
        clamp_push=bool(w.get("clamp_push", False)),
    )
    if args is not None and args.push_lambda is not None:
        weights = replace(weights, lambda_push=float(args.push_lambda))
    aug = None
    if "augment" in cfg:
        ag = cfg["augment"] or {}
        aug = data.AugmentConfig(
            crop_pad=int(ag.get("crop_pad", 4)), hflip_prob=float(ag.get("hflip_prob", 0.5)), seed=seed
        )
    tc = training.TrainConfig(
        epochs=int(t.get("epochs", 300)),
        freeze_epochs=int(t.get("freeze_epochs", 50)),
        batch_size=int(t.get("batch_size", 64)),
        lr0=float(t.get("lr0", 0.1)),
        lr_min=float(t.get("lr_min", 1e-5)),
        momentum=float(t.get("momentum", 0.9)),
        weight_decay=float(t.get("weight_decay", 2e-4)),
        teacher_lr=float(t.get("teacher_lr", 1e-5)),
        weights=weights,
        train_attack=_attack_config(cfg, seed),
        enable_push=bool(t.get("enable_push", True)),
        enable_itt=bool(t.get("enable_itt", True)),
        normalizer_mode=t.get("normalizer_mode", "first_batch"),
        augment=aug,
        trades_beta=float(t.get("trades_beta", 6.0)),
        seed=seed,
    )
    if args is not None:
        if args.no_push:
            tc.enable_push = False
        if args.no_itt:
            tc.enable_itt = False
    return tc


def cmd_synth_data(args) -> int:
    cfg = _load_config(args.config)
    seed = _require_seed(cfg, args)
    kind = args.kind or cfg.get("data", {}).get("kind", "two-moons")
    n = args.n if args.n is not None else int(cfg.get("data", {}).get("n", 2000))
    if kind == "two-moons":
        noise = args.noise if args.noise is not None else float(cfg.get("data", {}).get("noise", 0.1))
        ds = data.gen_two_moons(n, noise=noise, seed=seed)
    elif kind == "blobs":
        classes = int(cfg.get("data", {}).get("classes", args.classes))
        ds = data.gen_blobs(n, num_classes=classes, seed=seed)
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    out = Path(args.out) if args.out else _out_dir(cfg) / "dataset"
    data.save_dataset(ds, out)
    print(f"wrote {len(ds)} samples to {out}")
    return 0


def _load_data_arg(args, cfg: dict) -> data.Dataset:
    path = args.data or cfg.get("data", {}).get("path")
    if not path:
        raise ConfigError("no dataset path given (config data.path or --data)")
    return data.load_dataset(path)


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    seed = _require_seed(cfg, args)
    dataset = _load_data_arg(args, cfg)
    spec = _model_spec(cfg, dataset)
    tc = _train_config(cfg, seed)
    if args.epochs is not None:
        tc.epochs = args.epochs
    out = Path(args.out) if args.out else _out_dir(cfg) / f"teacher_{args.role}.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.role == "clean":
        model = training.pretrain_clean_teacher(spec, dataset, tc)
    else:
        model = training.pretrain_robust_teacher(spec, dataset, tc, mode=args.mode)
    nnkit.save_checkpoint(model, out)
    if args.log:
        Path(args.log).write_text("epoch,lr\n" + "".join(
            f"{e},{training._epoch_lr(tc, e - 1):.8f}\n" for e in range(1, tc.epochs + 1)
        ))
    print(f"wrote {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seed = _require_seed(cfg, args)
    dataset = _load_data_arg(args, cfg)
    tc = _train_config(cfg, seed, args)
    if args.epochs is not None:
        tc.epochs = args.epochs
    t_nat_path = args.clean_teacher or cfg.get("teachers", {}).get("clean")
    t_adv_path = args.robust_teacher or cfg.get("teachers", {}).get("robust")
    if not t_nat_path or not t_adv_path:
        raise ConfigError("both teacher checkpoints are required")
    t_nat = nnkit.load_checkpoint(t_nat_path)
    t_adv = nnkit.load_checkpoint(t_adv_path)
    spec = _model_spec(cfg, dataset)
    out = Path(args.out) if args.out else _out_dir(cfg) / "student.ckpt"
    log_path = Path(args.log) if args.log else _out_dir(cfg) / "train_log.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    student, logs = training.ciard_train(spec, t_nat, t_adv, dataset, tc)
    nnkit.save_checkpoint(student, out)
    training.write_epoch_logs(logs, log_path)
    print(f"wrote {out} and {log_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    seed = _require_seed(cfg, args)
    dataset = _load_data_arg(args, cfg)
    if args.n is not None:
        dataset = dataset.subset(slice(0, args.n))
    model_path = args.model or cfg.get("eval", {}).get("model")
    if not model_path:
        raise ConfigError("no model checkpoint given")
    model = nnkit.load_checkpoint(model_path)
    names = (args.attacks or cfg.get("eval", {}).get("attacks", ",".join(evaluation.EVAL_ATTACKS))).split(",")
    for name in names:
        if name not in evaluation.EVAL_ATTACKS:
            raise ConfigError(f"unknown attack {name!r} (choose from {', '.join(evaluation.EVAL_ATTACKS)})")
    acfg = _attack_config(cfg, seed)
    if args.attack_eps is not None:
        step = acfg.step if args.attack_eps > 0 else 1e-3
        acfg = replace(acfg, epsilon=args.attack_eps, step=step)
    model_id = args.model_id or Path(model_path).stem
    records = evaluation.evaluate_model(model, dataset, names, acfg, model_id=model_id)
    csv_text = evaluation.records_csv(records)
    if args.out:
        Path(args.out).write_text(csv_text)
        print(f"wrote {args.out}")
    else:
        print(csv_text, end="")
    return 0


def cmd_report(args) -> int:
    records = []
    for path in args.inputs:
        try:
            records.extend(evaluation.parse_records_csv(Path(path).read_text()))
        except OSError as e:
            raise ConfigError(f"cannot read {path}: {e}") from e
    table = evaluation.report(records)
    if args.out:
        Path(args.out).write_text(table)
    else:
        print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ciard", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--seed", type=int, help="master seed (mandatory here or in config)")

    sp = sub.add_parser("synth-data", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--kind", choices=["two-moons", "blobs"])
    sp.add_argument("--n", type=int)
    sp.add_argument("--noise", type=float)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("pretrain", help="pretrain a clean or robust teacher")
    common(sp)
    sp.add_argument("--role", choices=["clean", "robust"], required=True)
    sp.add_argument("--mode", choices=["sat", "trades"], default="sat")
    sp.add_argument("--data")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out")
    sp.add_argument("--log")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="run the cyclic dual-teacher distillation")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--clean-teacher")
    sp.add_argument("--robust-teacher")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--no-push", action="store_true", help="disable the contrastive push term")
    sp.add_argument("--no-itt", action="store_true", help="disable iterative teacher retraining")
    sp.add_argument("--lambda", dest="push_lambda", type=float, help="push loss weight")
    sp.add_argument("--out")
    sp.add_argument("--log")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint under the attack suite")
    common(sp)
    sp.add_argument("--model")
    sp.add_argument("--model-id")
    sp.add_argument("--data")
    sp.add_argument("--n", type=int, help="evaluate on the first n samples only")
    sp.add_argument("--attacks", help="comma-separated subset of " + ",".join(evaluation.EVAL_ATTACKS))
    sp.add_argument("--attack-eps", type=float)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="merge metrics CSVs into one table")
    sp.add_argument("inputs", nargs="*")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "report" and not args.inputs:
        print("error: report needs at least one input CSV", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CiardError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
