# backend/evaluation.py
import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import Checkpoint
from .data import Corpus, DataError
from .distill import (CE, FORWARD_KL, REVERSE_KL, ChainSpec, DistillConfig, resolve_vocab, run_direct_distill,
                      run_seqkd_distill, run_stepwise_chain, sft_steps, split_nll, train_ce)
from .surgery import COPY, apply_transform, interpolate, interpolate_from_chain, plan_expand, plan_subset, single_expand
from .tokenizer import Vocabulary, decode, encode
from .transformer import ModelConfig, count_params, sample

logger = logging.getLogger(__name__)

Curve = List[Tuple[int, float]]
CurveLike = Union[Sequence[float], Sequence[Tuple[int, float]]]


class EvaluationError(Exception):
    """Base error for metrics and experiment protocols"""


class MetricInputError(EvaluationError, ValueError):
    pass


class TargetNotReachedError(EvaluationError):
    pass


class ReportConfigMismatchError(EvaluationError, ValueError):
    pass


@dataclass
class EvalReport:
    name: str
    curves: Dict[str, Curve] = field(default_factory=dict)
    metrics: Dict[str, float] = field(default_factory=dict)
    steps_to_target: Optional[int] = None
    speedup: Optional[float] = None
    provenance: Dict[str, Any] = field(default_factory=dict)
    table: List[Dict[str, Any]] = field(default_factory=list)

    def __post_init__(self):
        self.curves = {run: sorted((int(s), float(v)) for s, v in points) for run, points in self.curves.items()}

    def summary(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "metrics": self.metrics,
            "steps_to_target": self.steps_to_target,
            "speedup": self.speedup,
            "provenance": self.provenance,
            "table": self.table,
        }


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def eval_loss(ckpt: Checkpoint, split: Sequence[str], vocab: Optional[Vocabulary] = None,
              batch: int = 8, seq_len: int = 32) -> float:
    """Mean next-token CE over every scored position of a split"""
    vocab = resolve_vocab(ckpt.config, vocab)
    try:
        total, count = split_nll(ckpt.config, ckpt.params, split, vocab, batch, seq_len)
    except DataError as e:
        raise MetricInputError(f"cannot evaluate {ckpt.name or 'checkpoint'}: {e}") from e
    if count == 0:
        raise MetricInputError("no scored positions in split")
    return total / count


def perplexity(ckpt: Checkpoint, split: Sequence[str], vocab: Optional[Vocabulary] = None,
               batch: int = 8, seq_len: int = 32) -> float:
    return math.exp(eval_loss(ckpt, split, vocab, batch, seq_len))


def accuracy(predictions: Sequence[Any], labels: Sequence[Any]) -> float:
    if len(predictions) != len(labels):
        raise MetricInputError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise MetricInputError("accuracy of an empty list")
    return sum(1 for p, y in zip(predictions, labels) if p == y) / len(labels)


def lcs_length(a: Sequence[Any], b: Sequence[Any]) -> int:
    row = [0] * (len(b) + 1)
    for x in a:
        prev = 0
        for j, y in enumerate(b, start=1):
            cur = row[j]
            row[j] = prev + 1 if x == y else max(row[j], row[j - 1])
            prev = cur
    return row[-1]


def rouge_l(candidate: Sequence[Any], reference: Sequence[Any], beta: float = 1.0) -> float:
    """LCS-based F-measure (1 + b^2) P R / (R + b^2 P)"""
    if not reference:
        raise MetricInputError("rouge_l needs a non-empty reference")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    b2 = beta * beta
    return (1 + b2) * p * r / (r + b2 * p)


def rouge_l_text(candidate: str, reference: str, beta: float = 1.0) -> float:
    return rouge_l(candidate.split(), reference.split(), beta)


def generation_rouge_l(ckpt: Checkpoint, split: Sequence[str], vocab: Optional[Vocabulary] = None,
                       prefix_chars: int = 16, max_new: int = 32, limit: int = 16) -> float:
    """Mean Rouge-L of greedy continuations of document prefixes against the true continuation"""
    vocab = resolve_vocab(ckpt.config, vocab)
    scores = []
    for doc in split[:limit]:
        prefix, rest = doc[:prefix_chars], doc[prefix_chars:prefix_chars + max_new]
        if not prefix or not rest.split():
            continue
        ids = encode(vocab, prefix, add_bos=True)[-ckpt.config.max_seq_len:]
        out = sample(ckpt.config, ckpt.params, ids, 1.0, max_new, seed=0, greedy=True, stop_id=vocab.eos_id)
        scores.append(rouge_l_text(decode(vocab, out), rest))
    if not scores:
        raise MetricInputError("no document long enough to score a continuation")
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# convergence
# ---------------------------------------------------------------------------

def as_curve(curve: CurveLike) -> Curve:
    """(step, loss) pairs; a plain list of losses is indexed from step 0"""
    points = list(curve)
    if points and not isinstance(points[0], (tuple, list)):
        return [(i, float(v)) for i, v in enumerate(points)]
    return sorted((int(s), float(v)) for s, v in points)


def steps_to_target(curve: CurveLike, target_loss: float) -> Optional[int]:
    """First step whose loss is <= target, or None"""
    points = as_curve(curve)
    if not points:
        raise MetricInputError("empty loss curve")
    for step, loss in points:
        if loss <= target_loss:
            return step
    return None


def speedup(curve_a: CurveLike, curve_b: CurveLike, target_loss: float) -> float:
    """steps_to_target(b) / steps_to_target(a); a step count of 0 counts as 1"""
    a, b = steps_to_target(curve_a, target_loss), steps_to_target(curve_b, target_loss)
    if a is None or b is None:
        which = "first" if a is None else "second"
        raise TargetNotReachedError(f"{which} curve never reaches loss {target_loss}")
    return max(1, b) / max(1, a)


def tail_std(curve: CurveLike, n: int = 100) -> float:
    """Population std of the last n losses"""
    points = as_curve(curve)
    if not points:
        raise MetricInputError("empty loss curve")
    return float(np.std([v for _, v in points[-n:]]))


def stage_curve(ckpt: Checkpoint, key: str = "curve") -> List[float]:
    """Loss curve recorded by the most recent lineage stage that has one"""
    for entry in reversed(ckpt.meta.lineage):
        if key in entry:
            return list(entry[key])
    return []


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def compare_init(cbd: Checkpoint, rand: Checkpoint, corpus: Corpus, cfg: DistillConfig,
                 vocab: Optional[Vocabulary] = None, eval_every: int = 10,
                 target_loss: Optional[float] = None) -> Tuple[EvalReport, EvalReport]:
    """Train a CBD-initialized and a random-initialized model identically; compare validation curves

    The target loss for steps_to_target/speedup defaults to the random run's
    final validation loss.
    """
    if cbd.config != rand.config:
        raise ReportConfigMismatchError("compare_init needs two checkpoints with the same config")
    if eval_every < 1:
        raise MetricInputError(f"eval_every must be >= 1, got {eval_every}")
    cfg = replace(cfg, loss_kind=CE, sft_warm_epochs=0)
    runs = {}
    for label, ckpt in (("cbd", cbd), ("rand", rand)):
        trained = train_ce(ckpt, corpus, vocab, cfg, name=f"{label}-trained", eval_every=eval_every)
        runs[label] = (trained, [tuple(p) for p in stage_curve(trained, "eval_curve")])
        logger.info(f"compare_init {label}: step-0 loss {runs[label][1][0][1]:.4f}, "
                    f"final loss {runs[label][1][-1][1]:.4f}")
    target = runs["rand"][1][-1][1] if target_loss is None else float(target_loss)
    gap = runs["rand"][1][0][1] - runs["cbd"][1][0][1]
    reports = []
    for label, other in (("cbd", "rand"), ("rand", "cbd")):
        trained, curve = runs[label]
        try:
            ratio = speedup(curve, runs[other][1], target)
        except TargetNotReachedError:
            ratio = None
        reports.append(EvalReport(
            name=label,
            curves={label: curve},
            metrics={"step0_loss": curve[0][1], "final_loss": curve[-1][1], "step_zero_gap": gap,
                     "target_loss": target},
            steps_to_target=steps_to_target(curve, target),
            speedup=ratio,
            provenance={"lineage": [e["stage"] for e in trained.meta.lineage[:-1]],
                        "seed": cfg.seed, "steps": cfg.steps},
        ))
    return reports[0], reports[1]


def alpha_sweep(small: Checkpoint, large: Checkpoint, dst_config: ModelConfig, alphas: Sequence[float],
                corpus: Corpus, vocab: Optional[Vocabulary] = None, batch: int = 8, seq_len: int = 32,
                mode: str = COPY, workers: int = 1) -> EvalReport:
    """Step-0 validation loss of the interpolated target per alpha"""
    if not alphas:
        raise MetricInputError("empty alpha list")

    def evaluate(alpha):
        target = interpolate(small, large, dst_config, float(alpha), mode)
        return eval_loss(target, corpus.validation, vocab, batch, seq_len)

    losses: Dict[float, float] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        future_to_alpha = {executor.submit(evaluate, a): float(a) for a in alphas}
        for future in as_completed(future_to_alpha):
            losses[future_to_alpha[future]] = future.result()
    rows = [{"alpha": a, "loss": losses[a]} for a in sorted(losses)]
    best = min(rows, key=lambda r: r["loss"])
    logger.info(f"alpha sweep over {len(rows)} values: best alpha {best['alpha']:g} (loss {best['loss']:.4f})")
    return EvalReport(
        name="alpha-sweep",
        curves={f"alpha={r['alpha']:g}": [(0, r["loss"])] for r in rows},
        metrics={"best_alpha": best["alpha"], "best_loss": best["loss"]},
        provenance={"small": small.name, "large": large.name, "target_params": count_params(dst_config),
                    "mode": mode},
        table=rows,
    )


def boundary_losses(small: Checkpoint, large: Checkpoint, dst_config: ModelConfig, corpus: Corpus,
                    vocab: Optional[Vocabulary] = None, batch: int = 8, seq_len: int = 32,
                    mode: str = COPY) -> Dict[str, float]:
    """Step-0 losses of the pure expand (alpha=1) and subset (alpha=0) initializations"""
    expanded = apply_transform(small, plan_expand(small.config, dst_config, mode))
    subset = apply_transform(large, plan_subset(large.config, dst_config))
    return {"expand": eval_loss(expanded, corpus.validation, vocab, batch, seq_len),
            "subset": eval_loss(subset, corpus.validation, vocab, batch, seq_len)}


def single_expansion_compare(anchors: Sequence[Checkpoint], dst_config: ModelConfig, corpus: Corpus,
                             vocab: Optional[Vocabulary] = None, batch: int = 8, seq_len: int = 32,
                             alpha: Optional[float] = None, mode: str = COPY) -> EvalReport:
    """Interpolated initialization vs expansion of the smallest anchor alone"""
    cbd, used_alpha = interpolate_from_chain(anchors, dst_config, alpha, mode)
    single = single_expand(anchors, dst_config, mode)
    cbd_loss = eval_loss(cbd, corpus.validation, vocab, batch, seq_len)
    single_loss = eval_loss(single, corpus.validation, vocab, batch, seq_len)
    return EvalReport(
        name="single-expansion",
        curves={"cbd": [(0, cbd_loss)], "single": [(0, single_loss)]},
        metrics={"cbd_loss": cbd_loss, "single_loss": single_loss, "alpha": used_alpha},
        provenance={"anchors": [a.name for a in anchors], "target_params": count_params(dst_config)},
    )


def chain_density(source: Checkpoint, variants: Sequence[ChainSpec], dst_config: ModelConfig, corpus: Corpus,
                  batch: int = 8, seq_len: int = 32, workers: int = 1) -> EvalReport:
    """Build one chain per variant and score the interpolated target at step 0"""
    if not variants:
        raise MetricInputError("no chain variants")

    def evaluate(spec):
        anchors = [source] + run_stepwise_chain(spec, corpus, source=source)
        target, alpha = interpolate_from_chain(anchors, dst_config)
        stage = target.meta.lineage[-1]
        return {"anchors": len(spec.anchors), "alpha": alpha,
                "loss": eval_loss(target, corpus.validation, spec.vocab, batch, seq_len),
                "bracket": [stage.get("small"), stage.get("large")]}

    rows: Dict[int, Dict[str, Any]] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        future_to_index = {executor.submit(evaluate, spec): k for k, spec in enumerate(variants)}
        for future in as_completed(future_to_index):
            rows[future_to_index[future]] = future.result()
    table = [dict(variant=k, **rows[k]) for k in sorted(rows)]
    return EvalReport(
        name="chain-density",
        curves={f"variant={r['variant']}": [(0, r["loss"])] for r in table},
        metrics={f"loss_anchors_{r['anchors']}": r["loss"] for r in table},
        provenance={"source": source.name, "target_params": count_params(dst_config)},
        table=table,
    )


def stage_steps(ckpt: Checkpoint) -> int:
    """Optimizer steps (CE warm-up included) taken by the most recent lineage stage"""
    stage = ckpt.meta.lineage[-1] if ckpt.meta.lineage else {}
    return int(stage.get("sft_steps", 0)) + int(stage.get("steps", 0))


def compare_distillation(source: Checkpoint, spec: ChainSpec, corpus: Corpus,
                         baselines: Sequence[str] = (REVERSE_KL, FORWARD_KL, "seqkd"),
                         batch: int = 8, seq_len: int = 32, tail: int = 100) -> EvalReport:
    """Stepwise chain vs direct distillation of the chain's smallest anchor under the same total steps

    The budget counts every optimizer step the chain took, CE warm-up included. A
    KL baseline keeps the last edge's warm-up and spends the rest on KL steps; the
    SeqKD baseline spends the whole budget on its sampled pairs.
    """
    vocab = resolve_vocab(source.config, spec.vocab)
    anchors = run_stepwise_chain(spec, corpus, source=source)
    budget = sum(stage_steps(a) for a in anchors)
    curves: Dict[str, List[float]] = {"chain": []}
    for a in anchors:
        curves["chain"].extend(stage_curve(a))
    students = {"chain": anchors[-1]}
    target, last = spec.anchors[-1], spec.edges[-1]
    kl_steps = budget - sft_steps(corpus, vocab, last)
    if any(kind in (REVERSE_KL, FORWARD_KL) for kind in baselines) and kl_steps <= 0:
        raise MetricInputError(f"chain budget {budget} leaves no KL steps after the direct run's warm-up")
    for kind in baselines:
        if kind in (REVERSE_KL, FORWARD_KL):
            student = run_direct_distill(source, target, corpus, replace(last, steps=kl_steps, loss_kind=kind), vocab,
                                         name=f"direct-{kind}")
        elif kind == "seqkd":
            student = run_seqkd_distill(source, target, corpus, replace(last, steps=budget, loss_kind=CE), vocab,
                                        name="direct-seqkd")
        else:
            raise MetricInputError(f"unknown baseline {kind!r}")
        students[f"direct-{kind}"] = student
        curves[f"direct-{kind}"] = stage_curve(student)
    metrics: Dict[str, float] = {}
    for run, student in students.items():
        metrics[f"{run}_final_loss"] = eval_loss(student, corpus.validation, vocab, batch, seq_len)
        if curves[run]:
            metrics[f"{run}_tail_std"] = tail_std(curves[run], tail)
    train_steps = {run: stage_steps(student) for run, student in students.items() if run != "chain"}
    train_steps["chain"] = budget
    return EvalReport(
        name="stepwise-vs-direct",
        curves={run: as_curve(c) for run, c in curves.items()},
        metrics=metrics,
        provenance={"source": source.name, "budget": budget, "train_steps": train_steps,
                    "anchors": [a.name for a in anchors]},
    )


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def write_report(report: EvalReport, out_dir: str) -> Tuple[str, str]:
    """<name>_curves.csv (run, step, loss) and <name>_summary.json"""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{report.name}_curves.csv")
    json_path = os.path.join(out_dir, f"{report.name}_summary.json")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run", "step", "loss"])
        for run, points in report.curves.items():
            for step, loss in points:
                writer.writerow([run, step, repr(float(loss))])
    with open(json_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report.summary(), fh, indent=2)
        fh.write("\n")
    return csv_path, json_path


def write_reports(reports: Sequence[EvalReport], out_dir: str) -> List[str]:
    paths = []
    for report in reports:
        paths.extend(write_report(report, out_dir))
    return paths


def read_curves_csv(path: str) -> Dict[str, Curve]:
    curves: Dict[str, Curve] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            curves.setdefault(row["run"], []).append((int(row["step"]), float(row["loss"])))
    return curves


def read_summary_json(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def read_report(csv_path: str, json_path: str) -> EvalReport:
    summary = read_summary_json(json_path)
    return EvalReport(name=summary["name"], curves=read_curves_csv(csv_path), metrics=summary["metrics"],
                      steps_to_target=summary["steps_to_target"], speedup=summary["speedup"],
                      provenance=summary["provenance"], table=summary["table"])
