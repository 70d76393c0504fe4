import json
import os
import struct

import numpy as np
import pytest

from app import EXIT_FAILURE, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, exit_code_for, main
from backend.checkpoint import load, save, to_bytes
from backend.distill import ChainEdgeError, DistillConfigError
from backend.evaluation import TargetNotReachedError, eval_loss
from backend.surgery import AlphaRangeError
from backend.testing import TINY, TINY_SMALL, make_checkpoint
from backend.transformer import ModelConfig

CORPUS = json.dumps({"kind": "markov", "seed": 3, "params": {"n_docs": 24, "doc_len": 40}})
TARGET = ModelConfig(n_layers=1, n_heads=2, head_dim=4, d_model=6, d_ff=12, vocab_size=260, max_seq_len=16)


def same_params(a, b):
    return a.config == b.config and all(a.params[n].tobytes() == b.params[n].tobytes() for n in a.params)


@pytest.fixture
def anchor_files(tmp_path):
    small, large = str(tmp_path / "small.cbdc"), str(tmp_path / "large.cbdc")
    save(make_checkpoint(TINY_SMALL, seed=2, name="small", std=0.1), small)
    save(make_checkpoint(TINY, seed=1, name="large", std=0.1), large)
    return small, large


def test_exit_codes():
    assert exit_code_for(AlphaRangeError("a")) == EXIT_NUMERIC
    assert exit_code_for(DistillConfigError("d")) == EXIT_USAGE
    assert exit_code_for(ChainEdgeError(0, "t", "s", ValueError("x"))) == 3
    assert exit_code_for(TargetNotReachedError("t")) == 5
    assert exit_code_for(KeyError("byte_len")) == EXIT_FAILURE


def test_inspect_prints_parameter_count(anchor_files, capsys):
    assert main(["inspect", "--in", anchor_files[1]]) == EXIT_OK
    out = capsys.readouterr().out
    assert "params: 3424" in out
    assert "name: large" in out


def test_bad_json_is_a_usage_error(tmp_path, capsys):
    code = main(["--out-dir", str(tmp_path), "chain", '{"anchors": ['])
    assert code == EXIT_USAGE
    err = capsys.readouterr().err
    assert err.startswith("Error running chain:") and "line 1" in err


def test_unknown_command_is_a_usage_error():
    assert main(["fly"]) == EXIT_USAGE


def test_corrupt_tensor_table_is_a_usage_error(tmp_path, capsys):
    buf = to_bytes(make_checkpoint(TINY))
    header_len = struct.unpack_from("<Q", buf, 8)[0]
    header = json.loads(buf[16:16 + header_len])
    del header["tensors"][0]["byte_len"]
    text = json.dumps(header).encode("utf-8")
    path = tmp_path / "broken.cbdc"
    path.write_bytes(buf[:8] + struct.pack("<Q", len(text)) + text + buf[16 + header_len:])
    assert main(["inspect", "--in", str(path)]) == EXIT_OK
    assert main(["expand", "--in", str(path), "--target-config", json.dumps(TINY.to_dict())]) == EXIT_USAGE
    assert "Error running expand:" in capsys.readouterr().err


def test_interpolate_alpha_one_equals_expand(tmp_path, anchor_files):
    small, large = anchor_files
    target = json.dumps(TARGET.to_dict())
    interp, expanded = str(tmp_path / "i.cbdc"), str(tmp_path / "e.cbdc")
    assert main(["interpolate", "--small", small, "--large", large, "--target-config", target,
                 "--alpha", "1", "--out", interp]) == EXIT_OK
    assert main(["expand", "--in", small, "--target-config", target, "--out", expanded]) == EXIT_OK
    assert same_params(load(interp), load(expanded))


def test_interpolate_auto_alpha(tmp_path, anchor_files, capsys):
    small, large = anchor_files
    out = str(tmp_path / "auto.cbdc")
    assert main(["interpolate", "--small", small, "--large", large, "--target-config",
                 json.dumps(TARGET.to_dict()), "--out", out]) == EXIT_OK
    assert "alpha = " in capsys.readouterr().out
    assert 0.0 < load(out).meta.lineage[-1]["alpha"] < 1.0


def test_interpolate_alpha_out_of_range(anchor_files):
    small, large = anchor_files
    code = main(["interpolate", "--small", small, "--large", large, "--target-config",
                 json.dumps(TARGET.to_dict()), "--alpha", "1.5"])
    assert code == EXIT_NUMERIC


def test_interpolate_target_outside_bracket(anchor_files):
    small, large = anchor_files
    outside = ModelConfig(3, 2, 4, 8, 16, 260, 16)
    code = main(["interpolate", "--small", small, "--large", large, "--target-config",
                 json.dumps(outside.to_dict())])
    assert code == EXIT_USAGE


def test_expand_plan_then_subset_restores_original(tmp_path, anchor_files):
    small, _ = anchor_files
    grown, plan, back = str(tmp_path / "g.cbdc"), str(tmp_path / "plan.json"), str(tmp_path / "b.cbdc")
    assert main(["expand", "--in", small, "--target-config", json.dumps(TINY.to_dict()), "--mode", "identity",
                 "--plan-out", plan, "--out", grown]) == EXIT_OK
    assert main(["subset", "--in", grown, "--plan", plan, "--out", back]) == EXIT_OK
    assert same_params(load(small), load(back))


def test_subset_needs_a_target(anchor_files):
    assert main(["subset", "--in", anchor_files[1]]) == EXIT_USAGE


def test_sweep_alpha_boundaries_match_transforms(tmp_path, anchor_files, capsys):
    small, large = anchor_files
    target = json.dumps(TARGET.to_dict())
    out_dir = str(tmp_path / "sweep")
    assert main(["--out-dir", out_dir, "sweep-alpha", "--small", small, "--large", large, "--target-config",
                 target, "--alphas", "0,1", "--corpus", CORPUS, "--batch", "4", "--seq-len", "8"]) == EXIT_OK
    with open(os.path.join(out_dir, "alpha-sweep_summary.json"), encoding="utf-8") as fh:
        table = json.load(fh)["table"]
    expanded, subset = str(tmp_path / "e.cbdc"), str(tmp_path / "s.cbdc")
    assert main(["expand", "--in", small, "--target-config", target, "--out", expanded]) == EXIT_OK
    assert main(["subset", "--in", large, "--target-config", target, "--out", subset]) == EXIT_OK
    from backend.data import build_corpus
    validation = build_corpus(json.loads(CORPUS)).validation
    assert table[0]["loss"] == eval_loss(load(subset), validation, None, 4, 8)
    assert table[1]["loss"] == eval_loss(load(expanded), validation, None, 4, 8)
    assert "best alpha" in capsys.readouterr().out


def chain_config(out_dir):
    return {
        "corpus": json.loads(CORPUS),
        "source": {"recipe": {"config": TINY.to_dict(), "steps": 2, "batch": 2, "seq_len": 8, "log_every": 0}},
        "anchors": [ModelConfig(1, 2, 4, 8, 16, 260, 16).to_dict(), TINY_SMALL.to_dict()],
        "edges": [{"steps": 2, "batch": 2, "seq_len": 8, "sft_warm_epochs": 0, "log_every": 0},
                  {"steps": 2, "batch": 2, "seq_len": 8, "sft_warm_epochs": 0, "log_every": 0}],
        "out_dir": out_dir,
    }


def test_chain_rerun_is_bitwise_identical(tmp_path, capsys):
    config = tmp_path / "chain.json"
    config.write_text(json.dumps(chain_config(str(tmp_path / "from-config"))), encoding="utf-8")
    first, second = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["--seed", "11", "--out-dir", first, "chain", str(config)]) == EXIT_OK
    assert main(["--seed", "11", "--out-dir", second, "chain", str(config)]) == EXIT_OK
    for name in ("anchor_1.cbdc", "anchor_2.cbdc"):
        with open(os.path.join(first, name), "rb") as a, open(os.path.join(second, name), "rb") as b:
            assert a.read() == b.read()
    assert load(os.path.join(first, "anchor_2.cbdc")).meta.seed == 11
    assert "anchor-2" in capsys.readouterr().out


def test_chain_uses_configured_out_dir(tmp_path):
    target = str(tmp_path / "from-config")
    config = tmp_path / "chain.json"
    config.write_text(json.dumps(chain_config(target)), encoding="utf-8")
    assert main(["chain", str(config)]) == EXIT_OK
    assert os.path.exists(os.path.join(target, "anchor_1.cbdc"))


def test_train_distill_and_eval(tmp_path, capsys):
    trained, student = str(tmp_path / "t.cbdc"), str(tmp_path / "s.cbdc")
    out_dir = str(tmp_path / "reports")
    assert main(["--seed", "4", "train", "--config", json.dumps(TINY.to_dict()), "--corpus", CORPUS,
                 "--steps", "2", "--batch", "2", "--seq-len", "8", "--out", trained]) == EXIT_OK
    assert main(["distill", "--teacher", trained, "--student-config", json.dumps(TINY_SMALL.to_dict()),
                 "--corpus", CORPUS, "--train", '{"sft_warm_epochs": 0}', "--steps", "2", "--batch", "2",
                 "--seq-len", "8", "--loss-kind", "forward_kl", "--out", student]) == EXIT_OK
    stages = [s["stage"] for s in load(student).meta.lineage]
    assert stages == ["trained:ce", "distilled-from:model"]
    assert main(["--out-dir", out_dir, "eval", "--in", student, "--corpus", CORPUS, "--batch", "4",
                 "--seq-len", "8"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "perplexity:" in out
    assert os.path.exists(os.path.join(out_dir, "eval_summary.json"))


def test_compare_init_writes_reports(tmp_path, anchor_files, capsys):
    _, large = anchor_files
    out_dir = str(tmp_path / "cmp")
    assert main(["--seed", "0", "--out-dir", out_dir, "compare-init", "--cbd", large, "--corpus", CORPUS,
                 "--steps", "2", "--batch", "2", "--seq-len", "8", "--eval-every", "1"]) == EXIT_OK
    assert os.path.exists(os.path.join(out_dir, "cbd_curves.csv"))
    assert os.path.exists(os.path.join(out_dir, "rand_summary.json"))
    assert "step-0 loss" in capsys.readouterr().out


def test_diverging_training_exits_with_training_code(tmp_path):
    ckpt = make_checkpoint(TINY, seed=0)
    ckpt.params["L0.ln1.g"] = np.full(TINY.d_model, np.nan, dtype=np.float32)
    path = str(tmp_path / "nan.cbdc")
    save(ckpt, path)
    code = main(["train", "--in", path, "--corpus", CORPUS, "--steps", "1", "--batch", "2", "--seq-len", "8",
                 "--out", str(tmp_path / "never.cbdc")])
    assert code == 3
