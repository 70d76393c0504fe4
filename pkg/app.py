import json
import logging
import os
import sys
from argparse import ArgumentParser
from dataclasses import replace

import backend.settings as settings_backend
from backend.checkpoint import Checkpoint, CheckpointError, Provenance, load, read_header, save
from backend.data import DataError, build_corpus
from backend.distill import (BridgeError, ChainEdgeError, ChainSpec, DistillConfig, DistillError, DivergenceError,
                             SeqKDError, distill_edge, run_chain, train_ce)
from backend.evaluation import (EvalReport, EvaluationError, alpha_sweep, compare_init, eval_loss,
                                generation_rouge_l, perplexity, write_report)
from backend.surgery import (AlphaRangeError, SurgeryError, TransformPlan, apply_transform, default_alpha,
                             interpolate, invert_expand, plan_expand, plan_subset)
from backend.tensor import TensorError
from backend.tokenizer import TokenizerError
from backend.transformer import ModelConfig, ModelError, count_params, init_random, resolve_config

logger = logging.getLogger("app")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_TRAINING, EXIT_NUMERIC, EXIT_EVAL = 0, 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


def load_json(value: str, what: str):
    """Inline JSON text or a path to a JSON file; errors carry line and column"""
    text, source = value, "inline"
    if os.path.isfile(value):
        source = value
        with open(value, "r", encoding="utf-8") as fh:
            text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"{what} ({source}): {e.msg} at line {e.lineno} column {e.colno}")


def exit_code_for(e: Exception) -> int:
    if isinstance(e, (ChainEdgeError, DivergenceError, BridgeError, SeqKDError)):
        return EXIT_TRAINING
    if isinstance(e, AlphaRangeError):
        return EXIT_NUMERIC
    if isinstance(e, EvaluationError):
        return EXIT_EVAL
    if isinstance(e, (UsageError, SurgeryError, ModelError, CheckpointError, DataError, TokenizerError, OSError)):
        return EXIT_USAGE
    if isinstance(e, DistillError):
        # config-shaped distill errors are ValueErrors; the rest happen while training
        return EXIT_USAGE if isinstance(e, ValueError) else EXIT_TRAINING
    if isinstance(e, (TensorError, FloatingPointError)):
        return EXIT_NUMERIC
    return EXIT_FAILURE


def _out(args, name: str) -> str:
    return args.out or settings_backend.out_path(name, out_dir=args.out_dir)


def _corpus(args):
    return build_corpus(load_json(args.corpus, "corpus"), seed=args.seed)


def _train_config(args, **defaults) -> DistillConfig:
    values = load_json(args.train, "train settings") if getattr(args, "train", None) else {}
    values = {**defaults, **values}
    for key in ("steps", "lr", "batch", "seq_len"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    if args.workers:
        values["workers"] = args.workers
    return DistillConfig.from_dict(values, "train").with_seed(args.seed)


def _print_lineage(lineage):
    for k, entry in enumerate(lineage):
        details = ", ".join(f"{key}={value}" for key, value in entry.items()
                            if key != "stage" and not isinstance(value, list))
        curve = entry.get("curve")
        tail = f", {len(curve)} curve points" if isinstance(curve, list) else ""
        print(f"  [{k}] {entry['stage']}" + (f" ({details}{tail})" if details or tail else ""))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_chain(args) -> int:
    data = load_json(args.config, "chain config")
    if not isinstance(data, dict):
        raise UsageError("chain config: expected a JSON object")
    if "corpus" not in data:
        raise UsageError("corpus: required")
    spec = ChainSpec.from_dict(data, seed=args.seed)
    if args.workers:
        spec.edges = [replace(e, workers=args.workers) for e in spec.edges]
    corpus = build_corpus(data["corpus"], seed=args.seed)
    out_dir = args.out_dir or data.get("out_dir") or settings_backend.OUT_DIR
    os.makedirs(out_dir, exist_ok=True)
    bridge, anchors = run_chain(spec, corpus, out_dir)
    if bridge is not None:
        print(f"bridge: {count_params(bridge.config)} params -> {os.path.join(out_dir, 'bridge.cbdc')}")
    for k, anchor in enumerate(anchors):
        print(f"{anchor.name}: {count_params(anchor.config)} params -> "
              f"{os.path.join(out_dir, f'anchor_{k + 1}.cbdc')}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    small, large = load(args.small), load(args.large)
    target = resolve_config(args.target_config, "target-config")
    if args.alpha == "auto":
        alpha = default_alpha(count_params(small.config), count_params(large.config), count_params(target))
    else:
        try:
            alpha = float(args.alpha)
        except ValueError:
            raise UsageError(f"--alpha: expected a number or 'auto', got {args.alpha!r}")
    ckpt = interpolate(small, large, target, alpha, args.mode, name=args.name or "")
    path = _out(args, "interpolated.cbdc")
    save(ckpt, path)
    print(f"alpha = {alpha:.6f}")
    print(f"wrote {count_params(target)}-param target to {path}")
    return EXIT_OK


def cmd_expand(args) -> int:
    src = load(args.input)
    plan = plan_expand(src.config, resolve_config(args.target_config, "target-config"), args.mode)
    ckpt = apply_transform(src, plan)
    path = _out(args, "expanded.cbdc")
    save(ckpt, path)
    inverse = invert_expand(plan)
    if args.plan_out:
        with open(args.plan_out, "w", encoding="utf-8") as fh:
            json.dump(inverse.to_dict(), fh, indent=2)
    print(f"expanded {count_params(src.config)} -> {count_params(plan.dst_config)} params ({args.mode}), "
          f"layer map {list(plan.layer_map)}")
    print(f"inverse plan keeps layers {list(inverse.layer_map)}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_subset(args) -> int:
    src = load(args.input)
    if args.plan:
        plan = TransformPlan.from_dict(load_json(args.plan, "plan"))
    elif args.target_config:
        plan = plan_subset(src.config, resolve_config(args.target_config, "target-config"))
    else:
        raise UsageError("subset needs --target-config or --plan")
    ckpt = apply_transform(src, plan)
    path = _out(args, "subset.cbdc")
    save(ckpt, path)
    print(f"subset {count_params(src.config)} -> {count_params(plan.dst_config)} params, "
          f"kept layers {list(plan.layer_map)}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load(args.input)
    corpus = _corpus(args)
    split = corpus.split(args.split)
    loss = eval_loss(ckpt, split, None, args.batch, args.seq_len)
    metrics = {"loss": loss, "perplexity": perplexity(ckpt, split, None, args.batch, args.seq_len)}
    if args.rouge:
        metrics["rouge_l"] = generation_rouge_l(ckpt, split)
    report = EvalReport(name=args.name or "eval", curves={ckpt.name or "model": [(ckpt.meta.step, loss)]},
                        metrics=metrics, provenance={"lineage": [e["stage"] for e in ckpt.meta.lineage],
                                                     "seed": ckpt.meta.seed, "split": args.split})
    _, json_path = write_report(report, args.out_dir or settings_backend.OUT_DIR)
    for key, value in metrics.items():
        print(f"{key}: {value:.6f}")
    print(f"report: {json_path}")
    return EXIT_OK


def cmd_compare_init(args) -> int:
    cbd = load(args.cbd)
    if args.rand:
        rand = load(args.rand)
    else:
        seed = args.seed if args.seed is not None else 0
        rand = Checkpoint(cbd.config, init_random(cbd.config, seed, dtype=cbd.dtype), Provenance(name="rand", seed=seed))
    cfg = _train_config(args)
    cbd_report, rand_report = compare_init(cbd, rand, _corpus(args), cfg, eval_every=args.eval_every,
                                           target_loss=args.target_loss)
    out_dir = args.out_dir or settings_backend.OUT_DIR
    for report in (cbd_report, rand_report):
        write_report(report, out_dir)
    print(f"step-0 loss: cbd {cbd_report.metrics['step0_loss']:.6f}, rand {rand_report.metrics['step0_loss']:.6f} "
          f"(gap {cbd_report.metrics['step_zero_gap']:.6f})")
    print(f"target loss {cbd_report.metrics['target_loss']:.6f}: cbd at step {cbd_report.steps_to_target}, "
          f"rand at step {rand_report.steps_to_target}, speedup {cbd_report.speedup}")
    return EXIT_OK


def cmd_sweep_alpha(args) -> int:
    small, large = load(args.small), load(args.large)
    target = resolve_config(args.target_config, "target-config")
    try:
        alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
    except ValueError:
        raise UsageError(f"--alphas: expected comma separated numbers, got {args.alphas!r}")
    report = alpha_sweep(small, large, target, alphas, _corpus(args), None, args.batch, args.seq_len,
                         args.mode, args.workers or settings_backend.WORKERS)
    write_report(report, args.out_dir or settings_backend.OUT_DIR)
    for row in report.table:
        print(f"alpha {row['alpha']:g}: loss {row['loss']:.6f}")
    print(f"best alpha {report.metrics['best_alpha']:g}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args, loss_kind="ce", sft_warm_epochs=0)
    if args.input:
        ckpt = load(args.input)
    elif args.config:
        config = resolve_config(args.config, "config")
        ckpt = Checkpoint(config, init_random(config, cfg.seed), Provenance(name=args.name or "model", seed=cfg.seed))
    else:
        raise UsageError("train needs --in or --config")
    trained = train_ce(ckpt, _corpus(args), None, cfg, name=args.name, eval_every=args.eval_every)
    path = _out(args, "trained.cbdc")
    save(trained, path)
    curve = trained.meta.lineage[-1]["curve"]
    print(f"trained {cfg.steps} steps, final loss {curve[-1] if curve else float('nan'):.6f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_distill(args) -> int:
    teacher = load(args.teacher)
    student_config = resolve_config(args.student_config, "student-config")
    cfg = _train_config(args)
    if args.loss_kind:
        cfg = replace(cfg, loss_kind=args.loss_kind)
    student = distill_edge(teacher, student_config, _corpus(args), cfg, None, args.name or "student")
    path = _out(args, "student.cbdc")
    save(student, path)
    curve = student.meta.lineage[-1]["curve"]
    print(f"distilled {count_params(teacher.config)} -> {count_params(student_config)} params "
          f"({cfg.loss_kind}, {len(curve)} steps)")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    header = read_header(args.input)
    config = ModelConfig.from_dict(header["config"])
    meta = header["meta"]
    print(f"name: {meta.get('name') or '(unnamed)'}")
    print(f"config: {json.dumps(header['config'], sort_keys=True)}")
    print(f"params: {count_params(config)}")
    print(f"tensors: {len(header['tensors'])} ({header['tensors'][0]['dtype'] if header['tensors'] else '-'})")
    print(f"seed: {meta.get('seed')}  step: {meta.get('step')}")
    print(f"lineage ({len(meta.get('lineage', []))} stages):")
    _print_lineage(meta.get("lineage", []))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="app.py", description="chain-based distillation toolkit")
    parser.add_argument("--seed", type=int, default=None, help="override every seed in the inputs")
    parser.add_argument("--out-dir", default=None, help="output directory (default: $CBD_OUT_DIR)")
    parser.add_argument("--workers", type=int, default=None, help="worker threads (default: $CBD_WORKERS)")
    sub = parser.add_subparsers(dest="command", required=True)

    def training_flags(p):
        p.add_argument("--corpus", required=True, help="corpus spec: JSON text or file")
        p.add_argument("--train", help="DistillConfig fields: JSON text or file")
        p.add_argument("--steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch", type=int)
        p.add_argument("--seq-len", dest="seq_len", type=int)

    p = sub.add_parser("chain", help="bridge (optional) then stepwise chain distillation")
    p.add_argument("config")
    p.set_defaults(func=cmd_chain)

    p = sub.add_parser("interpolate", help="initialize a target between two anchors")
    p.add_argument("--small", required=True)
    p.add_argument("--large", required=True)
    p.add_argument("--target-config", required=True)
    p.add_argument("--alpha", default="auto")
    p.add_argument("--mode", choices=("copy", "identity"), default="copy")
    p.add_argument("--name")
    p.add_argument("--out")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("expand", help="grow a checkpoint")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--target-config", required=True)
    p.add_argument("--mode", choices=("copy", "identity"), default="copy")
    p.add_argument("--plan-out", help="write the inverse subset plan as JSON")
    p.add_argument("--out")
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("subset", help="shrink a checkpoint")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--target-config")
    p.add_argument("--plan", help="apply a saved plan instead of even spacing")
    p.add_argument("--out")
    p.set_defaults(func=cmd_subset)

    p = sub.add_parser("eval", help="loss / perplexity / Rouge-L on a split")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="validation")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seq-len", dest="seq_len", type=int, default=32)
    p.add_argument("--rouge", action="store_true")
    p.add_argument("--name")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare-init", help="CBD vs random initialization curves")
    p.add_argument("--cbd", required=True)
    p.add_argument("--rand", help="random-init checkpoint (default: fresh init with --seed)")
    p.add_argument("--eval-every", type=int, default=10)
    p.add_argument("--target-loss", type=float)
    training_flags(p)
    p.set_defaults(func=cmd_compare_init)

    p = sub.add_parser("sweep-alpha", help="step-0 loss over interpolation coefficients")
    p.add_argument("--small", required=True)
    p.add_argument("--large", required=True)
    p.add_argument("--target-config", required=True)
    p.add_argument("--alphas", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", choices=("copy", "identity"), default="copy")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seq-len", dest="seq_len", type=int, default=32)
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("train", help="cross-entropy training")
    p.add_argument("--in", dest="input")
    p.add_argument("--config", help="model config for a fresh random init")
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--name")
    p.add_argument("--out")
    training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="one teacher -> student edge")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student-config", required=True)
    p.add_argument("--loss-kind", choices=("reverse_kl", "forward_kl", "ce"))
    p.add_argument("--name")
    p.add_argument("--out")
    training_flags(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("inspect", help="print config, parameter count and lineage")
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=settings_backend.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as e:
        code = exit_code_for(e)
        if code == EXIT_FAILURE:
            logger.error(f"{args.command} failed unexpectedly", exc_info=True)
        else:
            logger.debug(f"{args.command} failed", exc_info=True)
        print(f"Error running {args.command}: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
