# backend/transformer.py
import json
import logging
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

INIT_STD = 0.02
LN_EPS = 1e-5

ParamSet = Dict[str, np.ndarray]


class ModelError(Exception):
    """Base error for model configuration and forward passes"""


class ConfigError(ModelError, ValueError):
    pass


class TokenRangeError(ModelError, ValueError):
    pass


class SequenceLengthError(ModelError, ValueError):
    pass


class ParamShapeError(ModelError, ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    head_dim: int
    d_model: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    tied_lm_head: bool = True

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "tied_lm_head":
                if not isinstance(value, bool):
                    raise ConfigError(f"tied_lm_head: must be a boolean, got {value!r}")
                continue
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{f.name}: must be an integer >= 1, got {value!r}")

    @property
    def inner(self) -> int:
        """Attention inner width n_heads * head_dim"""
        return self.n_heads * self.head_dim

    def comparable(self, other: "ModelConfig") -> bool:
        return (self.head_dim == other.head_dim and self.vocab_size == other.vocab_size
                and self.max_seq_len == other.max_seq_len and self.tied_lm_head == other.tied_lm_head)

    def structurally_le(self, other: "ModelConfig") -> bool:
        return (self.comparable(other)
                and self.n_layers <= other.n_layers and self.n_heads <= other.n_heads
                and self.d_model <= other.d_model and self.d_ff <= other.d_ff)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], where: str = "config") -> "ModelConfig":
        if not isinstance(data, Mapping):
            raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
        missing = sorted(k for k in known - set(data) if k != "tied_lm_head")
        if missing:
            raise ConfigError(f"{where}: missing field(s) {', '.join(missing)}")
        try:
            return cls(**dict(data))
        except ConfigError as e:
            raise ConfigError(f"{where}.{e}") from None


def _preset(n_layers, n_heads, head_dim, d_model, d_ff, vocab_size=50257, max_seq_len=1024):
    return ModelConfig(n_layers, n_heads, head_dim, d_model, d_ff, vocab_size, max_seq_len, True)


PRESETS: Dict[str, ModelConfig] = {
    # SLM structures of the variable-size targets
    "slm-138m": _preset(14, 12, 64, 768, 3072),
    "slm-220m": _preset(18, 14, 64, 896, 3584),
    "slm-277m": _preset(24, 14, 64, 896, 3584),
    "slm-380m": _preset(26, 16, 64, 1024, 4096),
    "slm-537m": _preset(30, 18, 64, 1152, 4608),
    # GPT-2 family anchors
    "gpt2-b": _preset(12, 12, 64, 768, 3072),
    "gpt2-m": _preset(24, 16, 64, 1024, 4096),
    "gpt2-l": _preset(36, 20, 64, 1280, 5120),
    "gpt2-xl": _preset(48, 25, 64, 1600, 6400),
    # desk-scale chain over the byte-level vocabulary
    "toy-teacher": _preset(6, 6, 16, 96, 384, vocab_size=260, max_seq_len=64),
    "toy-anchor-1": _preset(4, 4, 16, 64, 256, vocab_size=260, max_seq_len=64),
    "toy-anchor-2": _preset(2, 2, 16, 32, 128, vocab_size=260, max_seq_len=64),
    "toy-target": _preset(3, 3, 16, 48, 192, vocab_size=260, max_seq_len=64),
}


def resolve_config(value: Union[str, Mapping[str, Any], ModelConfig], where: str = "config") -> ModelConfig:
    """Accept a ModelConfig, a preset name, a mapping, inline JSON text or a JSON file path"""
    if isinstance(value, ModelConfig):
        return value
    if isinstance(value, Mapping):
        return ModelConfig.from_dict(value, where)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: cannot build a model config from {type(value).__name__}")
    text = value.strip()
    if text in PRESETS:
        return PRESETS[text]
    if os.path.isfile(text):
        with open(text, "r", encoding="utf-8") as fh:
            text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{where}: not a preset, file or JSON object ({e.msg} at line {e.lineno} column {e.colno})")
    if isinstance(data, str) and data in PRESETS:
        return PRESETS[data]
    return ModelConfig.from_dict(data, where)


# ---------------------------------------------------------------------------
# parameter naming
# ---------------------------------------------------------------------------

def param_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Canonical ordered name -> shape map of a ParamSet"""
    d, inner, ff = config.d_model, config.inner, config.d_ff
    shapes = OrderedDict()
    shapes["embed.tok"] = (config.vocab_size, d)
    shapes["embed.pos"] = (config.max_seq_len, d)
    for i in range(config.n_layers):
        p = f"L{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "attn.wq"] = (d, inner)
        shapes[p + "attn.wk"] = (d, inner)
        shapes[p + "attn.wv"] = (d, inner)
        shapes[p + "attn.wo"] = (inner, d)
        shapes[p + "attn.bq"] = (inner,)
        shapes[p + "attn.bk"] = (inner,)
        shapes[p + "attn.bv"] = (inner,)
        shapes[p + "attn.bo"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "ffn.w1"] = (d, ff)
        shapes[p + "ffn.b1"] = (ff,)
        shapes[p + "ffn.w2"] = (ff, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["final.ln.g"] = (d,)
    shapes["final.ln.b"] = (d,)
    if not config.tied_lm_head:
        shapes["lm_head.w"] = (d, config.vocab_size)
    return shapes


def split_layer_name(name: str) -> Tuple[Optional[int], str]:
    """'L3.attn.wq' -> (3, 'attn.wq'); 'embed.tok' -> (None, 'embed.tok')"""
    if name.startswith("L") and "." in name:
        head, rest = name.split(".", 1)
        if head[1:].isdigit():
            return int(head[1:]), rest
    return None, name


def check_params(config: ModelConfig, params: Mapping[str, Any]):
    expected = param_shapes(config)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ParamShapeError(f"parameter names do not match config (missing {missing[:4]}, unexpected {extra[:4]})")
    for name, shape in expected.items():
        got = tuple(np.shape(params[name].data if isinstance(params[name], Tensor) else params[name]))
        if got != shape:
            raise ParamShapeError(f"{name}: shape {got} does not match config shape {shape}")


def count_params(config: ModelConfig) -> int:
    return int(sum(int(np.prod(s)) for s in param_shapes(config).values()))


def init_random(config: ModelConfig, seed: int, std: float = INIT_STD, dtype=np.float32) -> ParamSet:
    """Weights ~ N(0, std); biases and LN beta zero; LN gamma one"""
    rng = np.random.default_rng(seed)
    params: ParamSet = OrderedDict()
    for name, shape in param_shapes(config).items():
        _, local = split_layer_name(name)
        if local.endswith(".g") and "ln" in local:
            params[name] = np.ones(shape, dtype=dtype)
        elif len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return params


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def causal_mask(seq: int) -> np.ndarray:
    """True above the diagonal (future positions)"""
    return np.triu(np.ones((seq, seq), dtype=bool), k=1)


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise TokenRangeError(f"tokens must be a [batch, seq] matrix, got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise TokenRangeError(f"token ids must lie in [0, {config.vocab_size}), got [{tokens.min()}, {tokens.max()}]")
    if tokens.shape[1] > config.max_seq_len:
        raise SequenceLengthError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    return tokens.astype(np.int64)


def _attention(config: ModelConfig, p: Mapping[str, Tensor], prefix: str, h: Tensor, mask: np.ndarray) -> Tensor:
    batch, seq, _ = h.shape
    heads, hd = config.n_heads, config.head_dim

    def split(x):
        return T.transpose(T.reshape(x, (batch, seq, heads, hd)), (0, 2, 1, 3))

    q = split(h @ p[prefix + "attn.wq"] + p[prefix + "attn.bq"])
    k = split(h @ p[prefix + "attn.wk"] + p[prefix + "attn.bk"])
    v = split(h @ p[prefix + "attn.wv"] + p[prefix + "attn.bv"])
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / float(np.sqrt(hd)))
    probs = T.softmax(T.masked_fill(scores, mask))
    ctx = T.reshape(T.transpose(probs @ v, (0, 2, 1, 3)), (batch, seq, config.inner))
    return ctx @ p[prefix + "attn.wo"] + p[prefix + "attn.bo"]


def forward(config: ModelConfig, params: Mapping[str, Any], tokens) -> Tensor:
    """Logits [batch, seq, vocab] of a pre-LayerNorm causal decoder"""
    tokens = _check_tokens(config, tokens)
    p = {name: T.as_tensor(value) for name, value in params.items()}
    seq = tokens.shape[1]
    x = T.embedding(p["embed.tok"], tokens) + T.index(p["embed.pos"], slice(0, seq))
    mask = causal_mask(seq)
    for i in range(config.n_layers):
        prefix = f"L{i}."
        h = T.layer_norm(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"], LN_EPS)
        x = x + _attention(config, p, prefix, h, mask)
        h = T.layer_norm(x, p[prefix + "ln2.g"], p[prefix + "ln2.b"], LN_EPS)
        h = T.gelu(h @ p[prefix + "ffn.w1"] + p[prefix + "ffn.b1"])
        x = x + (h @ p[prefix + "ffn.w2"] + p[prefix + "ffn.b2"])
    x = T.layer_norm(x, p["final.ln.g"], p["final.ln.b"], LN_EPS)
    head = T.transpose(p["embed.tok"]) if config.tied_lm_head else p["lm_head.w"]
    return x @ head


def loss_ce(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over unmasked positions"""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise T.ShapeError(f"logits {logits.shape} and targets {targets.shape} disagree")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != targets.shape:
        raise T.ShapeError(f"mask {mask.shape} and targets {targets.shape} disagree")
    count = int(mask.sum())
    if count == 0:
        raise ModelError("loss over an empty mask")
    picked = T.take_last(T.log_softmax(logits), np.where(mask, targets, 0))
    weights = mask.astype(logits.dtype) / count
    return -T.tsum(picked * weights)


def nll_sum(logits: np.ndarray, targets, mask) -> Tuple[float, int]:
    """Untaped summed NLL and token count (aggregation across batches)"""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    logp = T.log_softmax_values(np.asarray(logits, dtype=np.float64))
    picked = np.take_along_axis(logp, np.where(mask, targets, 0)[..., None], axis=-1)[..., 0]
    return float(-(picked * mask).sum()), int(mask.sum())


def sample(config: ModelConfig, params: Mapping[str, Any], prompt: List[int], temperature: float,
           max_new: int, seed: int, greedy: bool = False, stop_id: Optional[int] = None) -> List[int]:
    """Autoregressive continuation of prompt; deterministic given seed"""
    if temperature <= 0 and not greedy:
        raise ModelError(f"temperature must be > 0, got {temperature}")
    if len(prompt) > config.max_seq_len:
        raise SequenceLengthError(f"prompt of {len(prompt)} tokens exceeds max_seq_len {config.max_seq_len}")
    if not prompt:
        raise ModelError("sampling needs a non-empty prompt")
    rng = np.random.default_rng(seed)
    weights = {name: T.as_tensor(value) for name, value in params.items()}
    out = list(prompt)
    generated = []
    for _ in range(max_new):
        context = out[-config.max_seq_len:]
        logits = forward(config, weights, np.asarray([context])).data[0, -1].astype(np.float64)
        if greedy:
            nxt = int(np.argmax(logits))
        else:
            probs = T.softmax_values(logits / temperature)
            nxt = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
            nxt = min(nxt, config.vocab_size - 1)
        generated.append(nxt)
        out.append(nxt)
        if stop_id is not None and nxt == stop_id:
            break
    return generated
