"""Operator surface: build synthetic tasks, train, evaluate, export adapted
features, and run the gradient self-check. Output is line-oriented key=value
records; exit codes are 0 (ok), 1 (usage), 2 (data error), 3 (numeric
failure).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .adapter import MetaPathWeights, forward
from .errors import (
    ConfigError,
    DimMismatchError,
    EmptyClassError,
    HegraphError,
    InvariantError,
    IoError,
    NonFiniteError,
    NonUnitRowError,
    SpecError,
    StepOutOfRangeError,
    ZeroQueryError,
    ZeroRowError,
)
from .io import load_checkpoint, load_task, save_checkpoint, write_hgaf
from .synth import SyntheticSpec, generate, run_gradient_suite
from .train import PROFILES, VARIANTS, TrainConfig, evaluate, plan_variant, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

GRAD_THRESHOLD = 1e-3

_DATA_ERRORS = (
    IoError, SpecError, ConfigError, DimMismatchError, ZeroRowError,
    NonUnitRowError, EmptyClassError, InvariantError, ZeroQueryError,
    FileNotFoundError, IsADirectoryError, PermissionError,
)
_NUMERIC_ERRORS = (NonFiniteError, StepOutOfRangeError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the CLI contract wants 1.
    def error(self, message):
        raise _UsageError(message)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


def emit(**kv) -> None:
    print(" ".join(f"{k}={_fmt(v)}" for k, v in kv.items()), flush=True)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hegraph",
                description="Heterogeneous graph adapter for few-shot "
                            "classification over frozen embeddings.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic task on disk")
    sp.add_argument("--spec", required=True, help="JSON SyntheticSpec file")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="tune the adapter on a task manifest")
    tp.add_argument("--manifest", required=True)
    tp.add_argument("--out", required=True, help="checkpoint output path")
    tp.add_argument("--variant", choices=VARIANTS, default="full")
    tp.add_argument("--profile", choices=sorted(PROFILES), default=None,
                    help="learning-rate/epoch preset")
    tp.add_argument("--epochs", type=int, default=None)
    tp.add_argument("--batch-size", type=int, default=None)
    tp.add_argument("--lr", type=float, default=None)
    tp.add_argument("--lambda", dest="lam", type=float, default=None)
    tp.add_argument("--tau", type=float, default=None)
    tp.add_argument("--alpha-pp", type=float, default=None)
    tp.add_argument("--alpha-vp", type=float, default=None)
    tp.add_argument("--alpha-np", type=float, default=None)
    tp.add_argument("--alpha-np-test", type=float, default=None)
    tp.add_argument("--beta-pn", type=float, default=None)
    tp.add_argument("--beta-vn", type=float, default=None)
    tp.add_argument("--gamma", type=float, default=None)
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--quiet", action="store_true",
                    help="suppress per-epoch progress records")
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", help="evaluate a checkpoint on a manifest's test set")
    ep.add_argument("--manifest", required=True)
    ep.add_argument("--ckpt", required=True)
    ep.set_defaults(func=cmd_eval)

    xp = sub.add_parser("export", help="dump adapted prompts or cache features")
    xp.add_argument("--ckpt", required=True)
    xp.add_argument("--what", choices=("adapted-prompts", "adapted-cache"),
                    required=True)
    xp.add_argument("--out", required=True, help="HGAF output path")
    xp.add_argument("--manifest", default=None,
                    help="task manifest (defaults to the one echoed in the checkpoint)")
    xp.set_defaults(func=cmd_export)

    gp = sub.add_parser("check-grad", help="finite-difference gradient self-check")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--count", type=int, default=10)
    gp.add_argument("--threshold", type=float, default=GRAD_THRESHOLD)
    gp.set_defaults(func=cmd_check_grad)

    return p


def cmd_synth(args) -> int:
    spec = SyntheticSpec.from_json(Path(args.spec).read_text())
    task = generate(spec)
    manifest = task.write(args.out)
    emit(event="synth", manifest=manifest, classes=spec.c, shots=spec.k,
         dim=spec.d, test_rows=int(task.test_labels.shape[0]), seed=spec.seed)
    return EXIT_OK


def _resolve_train_config(args, task) -> TrainConfig:
    """Precedence: explicit flags > manifest hyperparameter overrides >
    profile preset > shipped defaults."""
    overrides = task.overrides
    profile = PROFILES[args.profile] if args.profile else {}
    mp0 = MetaPathWeights()

    def pick(flag, key, fallback):
        if flag is not None:
            return flag
        if key in overrides:
            return overrides[key]
        return fallback

    mp = MetaPathWeights(
        beta_pn=pick(args.beta_pn, "beta_pn", mp0.beta_pn),
        beta_vn=pick(args.beta_vn, "beta_vn", mp0.beta_vn),
        alpha_pp=pick(args.alpha_pp, "alpha_pp", mp0.alpha_pp),
        alpha_vp=pick(args.alpha_vp, "alpha_vp", mp0.alpha_vp),
        alpha_np_train=pick(args.alpha_np, "alpha_np", mp0.alpha_np_train),
        alpha_np_test=pick(args.alpha_np_test, "alpha_np_test", mp0.alpha_np_test),
        gamma=pick(args.gamma, "gamma", mp0.gamma),
    )
    return TrainConfig(
        epochs=int(pick(args.epochs, "epochs", profile.get("epochs", 30))),
        batch_size=int(pick(args.batch_size, "batch_size", 64)),
        lr_base=float(pick(args.lr, "lr", profile.get("lr_base", 1e-3))),
        seed=args.seed,
        tau=float(args.tau if args.tau is not None else task.tau),
        lam=float(pick(args.lam, "lambda", 0.1)),
        mp=mp,
        variant=args.variant,
        manifest_path=os.path.abspath(args.manifest),
    ).validate()


def _emit_config(config: TrainConfig) -> None:
    emit(
        event="config", variant=config.variant, epochs=config.epochs,
        batch_size=config.batch_size, lr=config.lr_base,
        warmup_lr=config.warmup_lr, seed=config.seed, tau=config.tau,
        **{"lambda": config.lam},
        alpha_pp=config.mp.alpha_pp, alpha_vp=config.mp.alpha_vp,
        alpha_np=config.mp.alpha_np_train, alpha_np_test=config.mp.alpha_np_test,
        beta_pn=config.mp.beta_pn, beta_vn=config.mp.beta_vn,
        gamma=config.mp.gamma,
    )


def cmd_train(args) -> int:
    task = load_task(args.manifest, variant=args.variant)
    config = _resolve_train_config(args, task)
    _emit_config(config)

    eval_set = None
    if task.test_queries is not None:
        eval_set = (task.test_queries, task.test_labels)

    def log(record: dict) -> None:
        if record.get("event") == "epoch" and args.quiet:
            return
        emit(**record)

    ckpt = train(task.graph, config, eval_set=eval_set, log=log)
    save_checkpoint(args.out, ckpt)

    final = {"event": "final", "variant": config.variant, "epoch": ckpt.epoch}
    if ckpt.history["train_loss"]:
        final["train_loss"] = ckpt.history["train_loss"][-1]
    if ckpt.history["fused_accuracy"]:
        final["fused_accuracy"] = ckpt.history["fused_accuracy"][-1]
        final["text_accuracy"] = ckpt.history["text_accuracy"][-1]
    final["checkpoint"] = args.out
    emit(**final)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    task = load_task(args.manifest, variant=ckpt.config.variant)
    if task.test_queries is None:
        raise ConfigError("test_file: manifest has no test set to evaluate")
    if ckpt.weights.dim != task.graph.dim:
        raise DimMismatchError(
            f"checkpoint dim {ckpt.weights.dim} != task dim {task.graph.dim}"
        )
    res = evaluate(task.graph, ckpt.weights, task.test_queries,
                   task.test_labels, ckpt.config)
    emit(event="eval", fused_accuracy=res.fused_accuracy,
         text_accuracy=res.text_accuracy, count=res.count)
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    manifest = args.manifest or ckpt.config.manifest_path
    if manifest is None:
        raise ConfigError("--manifest required: checkpoint carries no manifest path")
    task = load_task(manifest, variant=ckpt.config.variant)
    if ckpt.weights.dim != task.graph.dim:
        raise DimMismatchError(
            f"checkpoint dim {ckpt.weights.dim} != task dim {task.graph.dim}"
        )
    plan = plan_variant(ckpt.config)
    out = forward(task.graph, ckpt.weights, plan.mp, "test",
                  negative_enabled=plan.negative_enabled,
                  visual_enabled=plan.visual_enabled)
    m = out.xp_tilde if args.what == "adapted-prompts" else out.xcache_tilde
    write_hgaf(m, args.out)
    emit(event="export", what=args.what, rows=m.shape[0], dim=m.shape[1],
         out=args.out)
    return EXIT_OK


def cmd_check_grad(args) -> int:
    results = run_gradient_suite(args.seed, args.count)
    for r in results:
        emit(event="grad_instance", seed=r.seed, c=r.c, d=r.d, k=r.k,
             max_rel_error=r.max_rel_error)
    worst = max(r.max_rel_error for r in results)
    ok = worst <= args.threshold
    emit(event="check_grad", instances=len(results), max_rel_error=worst,
         threshold=args.threshold, status="ok" if ok else "fail")
    return EXIT_OK if ok else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except _NUMERIC_ERRORS as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except HegraphError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
