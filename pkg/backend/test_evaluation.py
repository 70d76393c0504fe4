from functools import lru_cache

import numpy as np
import pytest

from backend.checkpoint import Checkpoint, Provenance
from backend.data import epoch_length
from backend.distill import ChainSpec, DistillConfig
from backend.evaluation import (EvalReport, MetricInputError, ReportConfigMismatchError, TargetNotReachedError,
                                accuracy, alpha_sweep, as_curve, boundary_losses, chain_density, compare_distillation,
                                compare_init, eval_loss, generation_rouge_l, lcs_length, perplexity, read_report,
                                rouge_l, rouge_l_text, single_expansion_compare, speedup, stage_curve,
                                steps_to_target, tail_std, write_report, write_reports)
from backend.testing import TINY, TINY_SMALL, make_checkpoint
from backend.tokenizer import byte_vocab
from backend.transformer import ModelConfig, param_shapes

MID = ModelConfig(n_layers=1, n_heads=2, head_dim=4, d_model=8, d_ff=16, vocab_size=260, max_seq_len=16)
TARGET = ModelConfig(n_layers=1, n_heads=2, head_dim=4, d_model=6, d_ff=12, vocab_size=260, max_seq_len=16)


def quick(**overrides):
    settings = {"steps": 3, "batch": 2, "seq_len": 8, "lr": 1e-3, "sft_warm_epochs": 0, "log_every": 0}
    settings.update(overrides)
    return DistillConfig(**settings)


def brute_lcs(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def test_rouge_l_matches_brute_force_lcs():
    rng = np.random.default_rng(0)
    words = ["a", "b", "c", "d"]
    for _ in range(200):
        cand = tuple(rng.choice(words, size=int(rng.integers(1, 9))).tolist())
        ref = tuple(rng.choice(words, size=int(rng.integers(1, 9))).tolist())
        lcs = brute_lcs(cand, ref)
        assert lcs_length(cand, ref) == lcs
        expected = 0.0 if lcs == 0 else 2 * (lcs / len(cand)) * (lcs / len(ref)) / (lcs / len(ref) + lcs / len(cand))
        assert rouge_l(cand, ref) == expected


def test_rouge_l_word_example():
    assert rouge_l_text("the cat sat", "the cat") == pytest.approx(0.8)
    assert rouge_l_text("dog", "the cat") == 0.0
    with pytest.raises(MetricInputError):
        rouge_l(["a"], [])


def test_accuracy():
    assert accuracy([1, 2, 3], [1, 0, 3]) == pytest.approx(2 / 3)
    with pytest.raises(MetricInputError):
        accuracy([1], [1, 2])
    with pytest.raises(MetricInputError):
        accuracy([], [])


def test_uniform_model_perplexity_is_vocab_size(corpus):
    params = {n: np.zeros(s, dtype=np.float32) for n, s in param_shapes(TINY).items()}
    uniform = Checkpoint(TINY, params, Provenance(name="uniform"))
    assert perplexity(uniform, corpus.validation, batch=4, seq_len=16) == pytest.approx(260, abs=1e-3)


def test_eval_loss_errors(tiny_ckpt):
    with pytest.raises(MetricInputError):
        eval_loss(tiny_ckpt, [])


def test_curves_and_steps_to_target():
    assert as_curve([3.0, 2.0]) == [(0, 3.0), (1, 2.0)]
    assert as_curve([(10, 1.0), (0, 2.0)]) == [(0, 2.0), (10, 1.0)]
    assert steps_to_target([5.0, 4.0, 3.0, 2.0], 3.0) == 2
    assert steps_to_target([5.0, 4.0], 1.0) is None
    with pytest.raises(MetricInputError):
        steps_to_target([], 1.0)


def test_speedup():
    cbd = [(0, 5.0), (140, 1.0)]
    rand = [(0, 5.0), (30500, 1.0)]
    assert speedup(cbd, rand, 1.0) == pytest.approx(217.857, abs=1e-3)
    assert speedup([1.0], [(10, 1.0)], 1.0) == 10.0
    with pytest.raises(TargetNotReachedError):
        speedup([5.0], rand, 1.0)


def test_tail_std_and_stage_curve(tiny_ckpt):
    assert tail_std([1.0, 9.0, 2.0, 2.0], n=2) == 0.0
    assert tail_std([1.0, 3.0]) == pytest.approx(1.0)
    staged = Checkpoint(TINY, tiny_ckpt.params, tiny_ckpt.meta.with_stage("a", curve=[1.0]).with_stage("b"))
    assert stage_curve(staged) == [1.0]
    assert stage_curve(tiny_ckpt) == []


def test_compare_init_identical_checkpoints(corpus):
    ckpt = make_checkpoint(TINY, seed=5, name="same")
    cbd, rand = compare_init(ckpt, ckpt, corpus, quick(steps=4), eval_every=2)
    assert cbd.curves["cbd"] == rand.curves["rand"]
    assert [step for step, _ in cbd.curves["cbd"]] == [0, 2, 4]
    assert cbd.metrics["step_zero_gap"] == 0.0
    assert cbd.speedup == 1.0 and rand.speedup == 1.0
    assert cbd.metrics["target_loss"] == rand.metrics["final_loss"]


def test_compare_init_argument_errors(tiny_ckpt, corpus):
    with pytest.raises(ReportConfigMismatchError):
        compare_init(tiny_ckpt, make_checkpoint(TINY_SMALL), corpus, quick())
    with pytest.raises(MetricInputError):
        compare_init(tiny_ckpt, tiny_ckpt, corpus, quick(), eval_every=0)


@pytest.fixture
def anchors():
    return make_checkpoint(TINY, seed=1, name="large", std=0.1), make_checkpoint(TINY_SMALL, seed=2, name="small",
                                                                                 std=0.1)


def test_alpha_sweep_boundaries_match_pure_transforms(anchors, corpus):
    large, small = anchors
    report = alpha_sweep(small, large, TARGET, [1.0, 0.0], corpus, batch=4, seq_len=8, workers=2)
    bounds = boundary_losses(small, large, TARGET, corpus, batch=4, seq_len=8)
    assert [row["alpha"] for row in report.table] == [0.0, 1.0]
    assert report.table[0]["loss"] == bounds["subset"]
    assert report.table[1]["loss"] == bounds["expand"]
    assert report.metrics["best_alpha"] in (0.0, 1.0)
    with pytest.raises(MetricInputError):
        alpha_sweep(small, large, TARGET, [], corpus)


def test_alpha_sweep_is_independent_of_workers(anchors, corpus):
    large, small = anchors
    alphas = [0.1, 0.5, 0.9]
    one = alpha_sweep(small, large, TARGET, alphas, corpus, batch=4, seq_len=8, workers=1)
    three = alpha_sweep(small, large, TARGET, alphas, corpus, batch=4, seq_len=8, workers=3)
    assert one.table == three.table


def test_single_expansion_compare(anchors, corpus):
    large, small = anchors
    report = single_expansion_compare([large, small], TARGET, corpus, batch=4, seq_len=8)
    assert set(report.curves) == {"cbd", "single"}
    assert 0.0 <= report.metrics["alpha"] <= 1.0


def test_generation_rouge_l_is_bounded(tiny_ckpt, corpus):
    score = generation_rouge_l(tiny_ckpt, corpus.train, prefix_chars=4, max_new=30, limit=4)
    assert 0.0 <= score <= 1.0
    with pytest.raises(MetricInputError):
        generation_rouge_l(tiny_ckpt, ["short"], prefix_chars=8)


def test_chain_density_and_compare_distillation(corpus):
    source = make_checkpoint(TINY, seed=3, name="source")
    one = ChainSpec(anchors=[TINY_SMALL], edges=[quick()])
    two = ChainSpec(anchors=[MID, TINY_SMALL], edges=[quick(), quick()])
    density = chain_density(source, [one, two], TARGET, corpus, batch=4, seq_len=8, workers=2)
    assert [row["anchors"] for row in density.table] == [1, 2]
    assert set(density.metrics) == {"loss_anchors_1", "loss_anchors_2"}

    report = compare_distillation(source, two, corpus, batch=4, seq_len=8, tail=3)
    assert report.provenance["budget"] == 6
    assert len(report.curves["chain"]) == 6
    assert len(report.curves["direct-reverse_kl"]) == 6
    assert report.provenance["train_steps"]["direct-seqkd"] == 6
    assert {"chain_final_loss", "direct-forward_kl_final_loss", "direct-seqkd_final_loss"} <= set(report.metrics)


def test_compare_distillation_matches_total_steps_with_warmup(corpus):
    source = make_checkpoint(TINY, seed=3, name="source")
    warm = quick(batch=8, sft_warm_epochs=1)
    spec = ChainSpec(anchors=[MID, TINY_SMALL], edges=[warm, warm])
    report = compare_distillation(source, spec, corpus, baselines=("reverse_kl", "forward_kl"),
                                  batch=4, seq_len=8, tail=3)
    epoch = epoch_length(corpus.train, byte_vocab(), 8, 8)
    budget = 2 * (epoch + 3)
    assert report.provenance["budget"] == budget
    assert report.provenance["train_steps"] == {"chain": budget, "direct-reverse_kl": budget,
                                                "direct-forward_kl": budget}
    assert len(report.curves["direct-reverse_kl"]) == budget - epoch


def test_report_files_round_trip(tmp_path):
    report = EvalReport(name="demo", curves={"cbd": [(2, 0.1 + 0.2), (0, 1 / 3)], "rand": [(0, 2.5)]},
                        metrics={"final_loss": 0.3}, steps_to_target=2, speedup=4.0,
                        provenance={"seed": 1}, table=[{"alpha": 0.5, "loss": 1.25}])
    csv_path, json_path = write_report(report, str(tmp_path))
    assert csv_path.endswith("demo_curves.csv") and json_path.endswith("demo_summary.json")
    again = read_report(csv_path, json_path)
    assert again == report
    assert again.curves["cbd"] == [(0, 1 / 3), (2, 0.1 + 0.2)]
    paths = write_reports([report, EvalReport(name="other")], str(tmp_path / "many"))
    assert len(paths) == 4
