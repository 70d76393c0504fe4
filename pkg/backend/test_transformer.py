from dataclasses import replace

import numpy as np
import pytest

from backend.tensor import Tensor
from backend.transformer import (INIT_STD, PRESETS, ConfigError, ModelConfig, ModelError, ParamShapeError,
                                 SequenceLengthError, TokenRangeError, check_params, count_params, forward, init_random,
                                 loss_ce, nll_sum, param_shapes, resolve_config, sample, split_layer_name)


def test_param_shapes_follow_canonical_order(tiny_config):
    names = list(param_shapes(tiny_config))
    assert names[:2] == ["embed.tok", "embed.pos"]
    assert names[2] == "L0.ln1.g"
    assert names[-2:] == ["final.ln.g", "final.ln.b"]
    assert "lm_head.w" not in names
    untied = ModelConfig(1, 1, 4, 4, 8, 260, 16, tied_lm_head=False)
    assert list(param_shapes(untied))[-1] == "lm_head.w"


def test_count_params_matches_shapes():
    config = PRESETS["toy-anchor-2"]
    assert count_params(config) == 35840
    assert count_params(config) == sum(int(np.prod(s)) for s in param_shapes(config).values())
    slm = PRESETS["slm-138m"]
    assert count_params(slm) == 138_615_552
    assert abs(count_params(slm) - 138e6) <= 0.02 * 138e6


def test_count_params_by_hand():
    # tok 5x2, pos 4x2, ln 2+2, q/k/v/o 4x(2x2) with biases 2+2+2+2, ln 2+2, ffn 2x3+3+3x2+2, final ln 2+2
    config = ModelConfig(n_layers=1, n_heads=1, head_dim=2, d_model=2, d_ff=3, vocab_size=5, max_seq_len=4)
    assert count_params(config) == 71
    untied = ModelConfig(1, 1, 2, 2, 3, 5, 4, tied_lm_head=False)
    assert count_params(untied) - count_params(config) == untied.d_model * untied.vocab_size
    slm = PRESETS["slm-138m"]
    assert count_params(replace(slm, tied_lm_head=False)) - count_params(slm) == 768 * 50257


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(0, 1, 4, 4, 8, 260, 16)
    with pytest.raises(ConfigError):
        ModelConfig(1, 1, 4, 4, 8, 260, 16, tied_lm_head="yes")
    with pytest.raises(ConfigError) as info:
        ModelConfig.from_dict({"n_layers": 1}, where="anchors[0]")
    assert "anchors[0]" in str(info.value)


def test_resolve_config_sources(tmp_path):
    assert resolve_config("toy-target") is PRESETS["toy-target"]
    data = PRESETS["toy-target"].to_dict()
    assert resolve_config(data) == PRESETS["toy-target"]
    path = tmp_path / "cfg.json"
    path.write_text('{"n_layers": 1, "n_heads": 1, "head_dim": 4, "d_model": 4, "d_ff": 8, '
                    '"vocab_size": 260, "max_seq_len": 16}')
    assert resolve_config(str(path)).d_ff == 8
    with pytest.raises(ConfigError) as info:
        resolve_config('{"n_layers": 1,')
    assert "line" in str(info.value)


def test_comparability_and_nesting():
    small, large = PRESETS["toy-anchor-2"], PRESETS["toy-anchor-1"]
    assert small.comparable(large)
    assert small.structurally_le(large)
    assert not large.structurally_le(small)
    other = ModelConfig(2, 2, 8, 32, 128, 260, 64)
    assert not small.comparable(other)


def test_split_layer_name():
    assert split_layer_name("L3.attn.wq") == (3, "attn.wq")
    assert split_layer_name("embed.tok") == (None, "embed.tok")
    assert split_layer_name("Lx.foo") == (None, "Lx.foo")


def test_init_random_is_seeded(tiny_config):
    a = init_random(tiny_config, seed=5)
    b = init_random(tiny_config, seed=5)
    c = init_random(tiny_config, seed=6)
    assert all(np.array_equal(a[n], b[n]) for n in a)
    assert not np.array_equal(a["embed.tok"], c["embed.tok"])
    assert np.array_equal(a["L0.ln1.g"], np.ones(tiny_config.d_model))
    assert not a["L1.attn.bq"].any()
    check_params(tiny_config, a)



def test_init_random_weight_scale():
    params = init_random(PRESETS["toy-anchor-2"], seed=0)
    weights = np.concatenate([w.ravel() for w in params.values() if w.ndim == 2])
    assert abs(weights.std() - INIT_STD) <= 0.05 * INIT_STD
    assert abs(weights.mean()) <= 0.05 * INIT_STD


def test_check_params_rejects_bad_shape(tiny_config):
    params = init_random(tiny_config, seed=0)
    params["L0.ffn.w1"] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(ParamShapeError):
        check_params(tiny_config, params)
    del params["L0.ffn.w1"]
    with pytest.raises(ParamShapeError):
        check_params(tiny_config, params)


def test_forward_shape_and_token_checks(tiny_config):
    params = init_random(tiny_config, seed=0)
    logits = forward(tiny_config, params, np.array([[1, 5, 9], [2, 3, 4]]))
    assert logits.shape == (2, 3, tiny_config.vocab_size)
    with pytest.raises(TokenRangeError):
        forward(tiny_config, params, np.array([[1, 260]]))
    with pytest.raises(TokenRangeError):
        forward(tiny_config, params, np.array([1, 2]))
    with pytest.raises(SequenceLengthError):
        forward(tiny_config, params, np.ones((1, tiny_config.max_seq_len + 1), dtype=np.int64))


def test_forward_is_causal(tiny_config):
    params = init_random(tiny_config, seed=2, std=0.2)
    a = forward(tiny_config, params, np.array([[4, 8, 15, 16]])).data
    b = forward(tiny_config, params, np.array([[4, 8, 15, 99]])).data
    assert np.array_equal(a[0, :3], b[0, :3])
    assert not np.allclose(a[0, 3], b[0, 3])


def test_zero_params_give_uniform_loss(tiny_config):
    params = {n: np.zeros(s) for n, s in param_shapes(tiny_config).items()}
    tokens = np.array([[1, 7, 9, 3]])
    loss = loss_ce(forward(tiny_config, params, tokens), np.array([[7, 9, 3, 2]]))
    assert loss.item() == pytest.approx(np.log(260), rel=1e-5)


def test_loss_ce_mask_and_empty_mask():
    logits = Tensor(np.log(np.array([[[0.5, 0.25, 0.25], [0.1, 0.8, 0.1]]])))
    targets = np.array([[0, 1]])
    only_first = loss_ce(logits, targets, np.array([[True, False]]))
    assert only_first.item() == pytest.approx(np.log(2), rel=1e-6)
    with pytest.raises(ModelError):
        loss_ce(logits, targets, np.array([[False, False]]))


def test_nll_sum_matches_loss_ce(tiny_config):
    params = init_random(tiny_config, seed=3, std=0.1)
    tokens = np.array([[1, 20, 30, 40], [1, 50, 60, 0]])
    targets = np.array([[20, 30, 40, 2], [50, 60, 2, 0]])
    mask = targets != 0
    logits = forward(tiny_config, params, tokens)
    total, count = nll_sum(logits.data, targets, mask)
    assert count == 7
    assert total / count == pytest.approx(loss_ce(logits, targets, mask).item(), rel=1e-4)


def test_sample_is_deterministic_and_stops(tiny_ckpt):
    config, params = tiny_ckpt.config, tiny_ckpt.params
    a = sample(config, params, [1, 40, 41], temperature=1.0, max_new=6, seed=11)
    b = sample(config, params, [1, 40, 41], temperature=1.0, max_new=6, seed=11)
    assert a == b and len(a) == 6
    greedy = sample(config, params, [1, 40], temperature=1.0, max_new=5, seed=0, greedy=True)
    first = greedy[0]
    stopped = sample(config, params, [1, 40], temperature=1.0, max_new=5, seed=0, greedy=True, stop_id=first)
    assert stopped == [first]


def test_sample_argument_errors(tiny_ckpt):
    config, params = tiny_ckpt.config, tiny_ckpt.params
    with pytest.raises(ModelError):
        sample(config, params, [1], temperature=0.0, max_new=2, seed=0)
    with pytest.raises(ModelError):
        sample(config, params, [], temperature=1.0, max_new=2, seed=0)
    with pytest.raises(SequenceLengthError):
        sample(config, params, [1] * (config.max_seq_len + 1), temperature=1.0, max_new=2, seed=0)
