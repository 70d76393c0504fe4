#!/usr/bin/env python3
"""
Seeded desk-scale runs of the chain distillation protocols.

Builds a byte-level source model on a Markov corpus, distills it down a chain of
two anchors and then checks the initialization, stepwise-vs-direct, alpha sweep
and vocabulary bridge protocols against their pass thresholds. Every run writes
its checkpoints and reports under --out-dir; --repeat reruns everything into a
second directory and compares the files byte for byte.

    python3 extras/desk_experiment.py --seed 0 --out-dir runs/desk
"""

import filecmp
import os
import sys
import time
from argparse import ArgumentParser
from typing import Any, Dict, List

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from backend.checkpoint import Checkpoint, Provenance, save
from backend.data import Corpus, gen_markov
from backend.distill import BridgeSpec, ChainSpec, DistillConfig, build_source, run_bridge, run_stepwise_chain
from backend.evaluation import alpha_sweep, compare_distillation, compare_init, stage_curve, write_report
from backend.surgery import interpolate_from_chain
from backend.transformer import PRESETS, ModelConfig, count_params, init_random

# 2 layers / d_model 32 like the smallest anchor, wider FFN: 40000 params, within 15% of 35840
NEAR_SMALL = ModelConfig(n_layers=2, n_heads=2, head_dim=16, d_model=32, d_ff=160, vocab_size=260, max_seq_len=64)
CHAR_BRIDGE = ModelConfig(n_layers=4, n_heads=4, head_dim=16, d_model=64, d_ff=256, vocab_size=100, max_seq_len=64)

SWEEP_ALPHAS = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]


def desk_corpus(seed: int = 0) -> Corpus:
    return gen_markov(seed=seed, n_docs=400, doc_len=200)


def edge_config(seed: int, steps: int, **overrides) -> DistillConfig:
    values = {"steps": steps, "batch": 8, "seq_len": 32, "lr": 3e-3, "seed": seed, "log_every": 100}
    values.update(overrides)
    return DistillConfig(**values)


def desk_source(corpus: Corpus, seed: int = 0, steps: int = 2000) -> Checkpoint:
    recipe = {"config": "toy-teacher", **edge_config(seed, steps, loss_kind="ce", sft_warm_epochs=0).to_dict()}
    return build_source(recipe, corpus)


def desk_chain(seed: int = 0, steps: int = 2000) -> ChainSpec:
    return ChainSpec(anchors=[PRESETS["toy-anchor-1"], PRESETS["toy-anchor-2"]],
                     edges=[edge_config(seed, steps), edge_config(seed, steps)])


def init_protocol(source: Checkpoint, anchors: List[Checkpoint], corpus: Corpus, seed: int = 0,
                  steps: int = 2000, out_dir: str = "") -> Dict[str, Any]:
    """CBD vs random init of the 3-layer target: step-0 loss and steps to the random run's final loss"""
    target_config = PRESETS["toy-target"]
    cbd, alpha = interpolate_from_chain([source] + anchors, target_config)
    rand = Checkpoint(target_config, init_random(target_config, seed), Provenance(name="rand", seed=seed))
    cbd_report, rand_report = compare_init(cbd, rand, corpus, edge_config(seed, steps), eval_every=max(1, steps // 40))
    if out_dir:
        save(cbd, os.path.join(out_dir, "target_cbd_init.cbdc"))
        write_report(cbd_report, out_dir)
        write_report(rand_report, out_dir)
    cbd_step0, rand_step0 = cbd_report.metrics["step0_loss"], rand_report.metrics["step0_loss"]
    reached = cbd_report.steps_to_target
    return {
        "alpha": alpha,
        "cbd_step0": cbd_step0,
        "rand_step0": rand_step0,
        "cbd_steps_to_target": reached,
        "speedup": cbd_report.speedup,
        "passed": cbd_step0 <= 0.8 * rand_step0 and reached is not None and reached <= steps // 2,
    }


def stepwise_protocol(source: Checkpoint, corpus: Corpus, seed: int = 0, steps: int = 2000,
                      out_dir: str = "") -> Dict[str, Any]:
    """Chain path vs one direct edge to the smallest anchor under the same step budget"""
    report = compare_distillation(source, desk_chain(seed, steps), corpus, tail=100)
    if out_dir:
        write_report(report, out_dir)
    m = report.metrics
    return {
        "chain_final": m["chain_final_loss"],
        "direct_final": m["direct-reverse_kl_final_loss"],
        "chain_tail_std": m["chain_tail_std"],
        "direct_tail_std": m["direct-reverse_kl_tail_std"],
        "passed": (m["chain_final_loss"] <= 1.02 * m["direct-reverse_kl_final_loss"]
                   and m["chain_tail_std"] <= m["direct-reverse_kl_tail_std"]),
    }


def sweep_protocol(anchors: List[Checkpoint], corpus: Corpus, out_dir: str = "", workers: int = 1) -> Dict[str, Any]:
    """Alpha sweep for a target just above the smallest anchor; the best alpha should sit near 1"""
    large, small = anchors[0], anchors[1]
    report = alpha_sweep(small, large, NEAR_SMALL, SWEEP_ALPHAS, corpus, batch=8, seq_len=32, workers=workers)
    if out_dir:
        write_report(report, out_dir)
    best = report.metrics["best_alpha"]
    return {"best_alpha": best, "target_params": count_params(NEAR_SMALL), "table": report.table,
            "passed": best >= 0.7}


def bridge_protocol(source: Checkpoint, corpus: Corpus, seed: int = 0, steps: int = 1000,
                    out_dir: str = "") -> Dict[str, Any]:
    """Byte-level source -> char-level bridge by sequence-level distillation"""
    spec = BridgeSpec(bridge_config=CHAR_BRIDGE, n_samples=128, prompt_chars=16, gen_max_len=48, seed=seed,
                      train=edge_config(seed, steps, loss_kind="ce", sft_warm_epochs=0, seq_len=64))
    bridge = run_bridge(spec, source, corpus)
    if out_dir:
        save(bridge, os.path.join(out_dir, "bridge.cbdc"))
    curve = stage_curve(bridge)
    return {"step0_ce": curve[0], "final_ce": curve[-1], "passed": curve[-1] <= 0.7 * curve[0]}


def run_all(seed: int, out_dir: str, steps: int = 2000, bridge_steps: int = 1000,
            workers: int = 1) -> Dict[str, Dict[str, Any]]:
    os.makedirs(out_dir, exist_ok=True)
    corpus = desk_corpus(seed)
    started = time.time()
    print(f"Training the {count_params(PRESETS['toy-teacher'])}-param source for {steps} steps...")
    source = desk_source(corpus, seed, steps)
    save(source, os.path.join(out_dir, "source.cbdc"))
    print("Distilling the chain...")
    anchors = run_stepwise_chain(desk_chain(seed, steps), corpus, source=source, out_dir=out_dir)
    results = {}
    print("Initialization protocol...")
    results["init"] = init_protocol(source, anchors, corpus, seed, steps, out_dir)
    print("Stepwise vs direct protocol...")
    results["stepwise"] = stepwise_protocol(source, corpus, seed, steps, out_dir)
    print("Alpha sweep protocol...")
    results["sweep"] = sweep_protocol(anchors, corpus, out_dir, workers)
    print("Vocabulary bridge protocol...")
    results["bridge"] = bridge_protocol(source, corpus, seed, bridge_steps, out_dir)
    print(f"Finished in {time.time() - started:.0f}s")
    return results


def differing_outputs(first: str, second: str) -> List[str]:
    """Names of files that differ between two run directories"""
    names = sorted(set(os.listdir(first)) | set(os.listdir(second)))
    _, mismatch, errors = filecmp.cmpfiles(first, second, names, shallow=False)
    return mismatch + errors


def main(argv=None) -> int:
    parser = ArgumentParser(description="seeded desk-scale chain distillation experiment")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-dir", default=os.path.join("runs", "desk"))
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--bridge-steps", type=int, default=1000)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--repeat", action="store_true", help="rerun into <out-dir>-repeat and compare the files")
    args = parser.parse_args(argv)

    results = run_all(args.seed, args.out_dir, args.steps, args.bridge_steps, args.workers)
    failed = 0
    for protocol, result in results.items():
        mark = "✓" if result["passed"] else "✗"
        details = ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                            for k, v in result.items() if k not in ("passed", "table"))
        print(f"  {mark} {protocol}: {details}")
        if not result["passed"]:
            failed += 1

    if args.repeat:
        again = args.out_dir.rstrip("/\\") + "-repeat"
        run_all(args.seed, again, args.steps, args.bridge_steps, args.workers)
        differing = differing_outputs(args.out_dir, again)
        if differing:
            print(f"  ✗ determinism: {len(differing)} files differ ({', '.join(differing[:5])})")
            failed += 1
        else:
            print("  ✓ determinism: every checkpoint and report is byte-identical")

    total = len(results) + (1 if args.repeat else 0)
    print(f"\nPassed: {total - failed}, failed: {failed}")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
