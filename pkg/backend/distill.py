# backend/distill.py
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, Provenance, load, save
from .data import Batch, Corpus, batches, epoch_length, eval_batches, sequence_batches
from .surgery import SurgeryError, apply_transform, plan_subset
from .tensor import NonFiniteError, Tensor
from .tokenizer import EOS, TokenizerError, Vocabulary, decode, encode, get_tokenizer, tokenizer_for_size
from .transformer import (ModelConfig, ModelError, ParamSet, count_params, forward, init_random, loss_ce, nll_sum,
                          resolve_config, sample)

logger = logging.getLogger(__name__)

REVERSE_KL, FORWARD_KL, CE = "reverse_kl", "forward_kl", "ce"
LOSS_KINDS = (REVERSE_KL, FORWARD_KL, CE)
INIT_SUBSET, INIT_RANDOM = "subset", "random"


class DistillError(Exception):
    """Base error for training and distillation"""


class DistillConfigError(DistillError, ValueError):
    pass


class VocabMismatchError(DistillError, ValueError):
    pass


class LossShapeError(DistillError, ValueError):
    pass


class ChainSpecError(DistillError, ValueError):
    pass


class BridgeSpecError(DistillError, ValueError):
    pass


class SeqKDError(DistillError, ValueError):
    pass


class DivergenceError(DistillError, FloatingPointError):
    """Non-finite loss or activation during training"""

    def __init__(self, step: int, label: str, cause: Any):
        self.step = step
        self.label = label
        super().__init__(f"{label}: diverged at step {step} ({cause})")


class ChainEdgeError(DistillError):
    def __init__(self, edge: int, teacher: str, student: str, cause: Exception):
        self.edge = edge
        self.cause = cause
        super().__init__(f"chain edge {edge} ({teacher} -> {student}) failed: {cause}")


class BridgeError(DistillError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _check_fields(cls, data: Mapping[str, Any], where: str):
    if not isinstance(data, Mapping):
        raise DistillConfigError(f"{where}: expected an object, got {type(data).__name__}")
    unknown = sorted(set(data) - {f.name for f in fields(cls)})
    if unknown:
        raise DistillConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")


@dataclass(frozen=True)
class DistillConfig:
    steps: int = 200
    batch: int = 8
    seq_len: int = 32
    lr: float = 3e-3
    temperature: float = 1.0
    loss_kind: str = REVERSE_KL
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: Optional[float] = 1.0
    seed: int = 0
    sft_warm_epochs: int = 1
    student_init: str = INIT_SUBSET
    log_every: int = 50
    workers: int = 1

    def __post_init__(self):
        ints = {"steps": 0, "batch": 1, "seq_len": 2, "sft_warm_epochs": 0, "log_every": 0, "workers": 1}
        for name, low in ints.items():
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < low:
                raise DistillConfigError(f"{name}: must be an integer >= {low}, got {value!r}")
        for name in ("lr", "temperature", "eps"):
            if not getattr(self, name) > 0:
                raise DistillConfigError(f"{name}: must be > 0, got {getattr(self, name)!r}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise DistillConfigError(f"{name}: must lie in [0, 1), got {getattr(self, name)!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise DistillConfigError(f"grad_clip: must be > 0 or null, got {self.grad_clip!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise DistillConfigError(f"loss_kind: expected one of {', '.join(LOSS_KINDS)}, got {self.loss_kind!r}")
        if self.student_init not in (INIT_SUBSET, INIT_RANDOM):
            raise DistillConfigError(f"student_init: expected subset or random, got {self.student_init!r}")

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], where: str = "edge") -> "DistillConfig":
        _check_fields(cls, data, where)
        try:
            return cls(**dict(data))
        except DistillConfigError as e:
            raise DistillConfigError(f"{where}.{e}") from None
        except TypeError as e:
            raise DistillConfigError(f"{where}: {e}") from None

    def with_seed(self, seed: Optional[int]) -> "DistillConfig":
        return self if seed is None else replace(self, seed=int(seed))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _loss_mask(student_logits: Tensor, teacher_logits: np.ndarray, mask) -> Tuple[np.ndarray, int]:
    if student_logits.shape[-1] != teacher_logits.shape[-1]:
        raise LossShapeError(f"vocabulary mismatch: student {student_logits.shape[-1]} vs teacher {teacher_logits.shape[-1]}")
    if student_logits.shape != teacher_logits.shape:
        raise LossShapeError(f"logit shapes differ: student {student_logits.shape} vs teacher {teacher_logits.shape}")
    lead = student_logits.shape[:-1]
    mask = np.ones(lead, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != lead:
        raise LossShapeError(f"mask shape {mask.shape} does not match logits {lead}")
    count = int(mask.sum())
    if count == 0:
        raise LossShapeError("loss over an empty mask")
    return mask, count


def _scaled(student_logits, teacher_logits, temperature: float) -> Tuple[Tensor, np.ndarray]:
    s = T.as_tensor(student_logits)
    t = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits, dtype=s.dtype)
    if temperature != 1.0:
        inv = s.dtype.type(1.0 / temperature)
        s, t = s * inv, t * inv
    return s, t


def reverse_kl_loss(student_logits, teacher_logits, mask=None, temperature: float = 1.0) -> Tensor:
    """Mean over unmasked positions of sum_v S_v (ln S_v - ln T_v); teacher side is constant"""
    s, t = _scaled(student_logits, teacher_logits, temperature)
    mask, count = _loss_mask(s, t, mask)
    log_s = T.log_softmax(s)
    log_t = T.log_softmax_values(t)
    per_position = T.tsum(T.exp(log_s) * (log_s - log_t), axis=-1)
    return T.tsum(per_position * (mask.astype(s.dtype) / count))


def forward_kl_loss(student_logits, teacher_logits, mask=None, temperature: float = 1.0) -> Tensor:
    """Mean over unmasked positions of sum_v T_v (ln T_v - ln S_v)"""
    s, t = _scaled(student_logits, teacher_logits, temperature)
    mask, count = _loss_mask(s, t, mask)
    log_s = T.log_softmax(s)
    log_t = T.log_softmax_values(t)
    per_position = T.tsum((log_t - log_s) * np.exp(log_t), axis=-1)
    return T.tsum(per_position * (mask.astype(s.dtype) / count))


KL_LOSSES = {REVERSE_KL: reverse_kl_loss, FORWARD_KL: forward_kl_loss}


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update; returns new arrays and a new state"""
    if set(params) != set(grads):
        raise LossShapeError(f"gradient names do not match parameters ({sorted(set(params) ^ set(grads))[:4]})")
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise LossShapeError(f"{name}: gradient shape {g.shape} does not match parameter {p.shape}")
        dt = p.dtype.type
        g = g.astype(p.dtype, copy=False)
        m = dt(beta1) * state.m.get(name, np.zeros_like(p)) + dt(1.0 - beta1) * g
        v = dt(beta2) * state.v.get(name, np.zeros_like(p)) + dt(1.0 - beta2) * (g * g)
        m_hat = m / dt(1.0 - beta1 ** t)
        v_hat = v / dt(1.0 - beta2 ** t)
        new_params[name] = (p - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))).astype(p.dtype, copy=False)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: (g * g.dtype.type(scale)).astype(g.dtype, copy=False) for k, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def teacher_logits(teacher: Checkpoint, tokens: np.ndarray, workers: int = 1) -> np.ndarray:
    """Untaped teacher forward; rows split across workers and re-joined in order"""
    tokens = np.asarray(tokens)
    if workers <= 1 or tokens.shape[0] < 2:
        return forward(teacher.config, teacher.params, tokens).data
    chunks = np.array_split(np.arange(tokens.shape[0]), min(workers, tokens.shape[0]))
    with ThreadPoolExecutor(max_workers=len(chunks)) as executor:
        parts = list(executor.map(lambda rows: forward(teacher.config, teacher.params, tokens[rows]).data, chunks))
    return np.concatenate(parts, axis=0)


LossFn = Callable[[Tensor, Batch], Tensor]
Monitor = Callable[[int, ParamSet], None]


def _train_loop(config: ModelConfig, params: ParamSet, stream: Iterator[Batch], steps: int,
                loss_fn: LossFn, cfg: DistillConfig, label: str,
                monitor: Optional[Monitor] = None) -> Tuple[ParamSet, List[float]]:
    """Adam over a batch stream; monitor(step, params) sees the weights before each update and after the last"""
    names = list(params)
    state = AdamState()
    curve: List[float] = []
    for step in range(steps):
        if monitor is not None:
            monitor(step, params)
        batch = next(stream)

        def objective(leaves):
            return loss_fn(forward(config, dict(zip(names, leaves)), batch.tokens), batch)

        try:
            value, grads = T.value_and_grad(objective, [params[n] for n in names])
        except NonFiniteError as e:
            raise DivergenceError(step, label, e) from e
        if not np.isfinite(value):
            raise DivergenceError(step, label, f"loss {value}")
        curve.append(float(value))
        g = {n: grad.data for n, grad in zip(names, grads)}
        if cfg.grad_clip is not None:
            g, _ = clip_by_global_norm(g, cfg.grad_clip)
        params, state = adam_step(params, g, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        if cfg.log_every and (step % cfg.log_every == 0 or step == steps - 1):
            logger.info(f"{label}: step {step} loss {value:.4f}")
    if monitor is not None:
        monitor(steps, params)
    return dict((n, params[n]) for n in names), curve


def _ce_loss(logits: Tensor, batch: Batch) -> Tensor:
    return loss_ce(logits, batch.targets, batch.mask)


def resolve_vocab(config: ModelConfig, vocab: Optional[Vocabulary]) -> Vocabulary:
    if vocab is None:
        try:
            return tokenizer_for_size(config.vocab_size)
        except TokenizerError as e:
            raise VocabMismatchError(str(e))
    if vocab.size != config.vocab_size:
        raise VocabMismatchError(f"tokenizer {vocab.name!r} has {vocab.size} tokens, model expects {config.vocab_size}")
    return vocab


def _check_seq_len(cfg: DistillConfig, *configs: ModelConfig):
    limit = min(c.max_seq_len for c in configs)
    if cfg.seq_len > limit:
        raise DistillConfigError(f"seq_len {cfg.seq_len} exceeds max_seq_len {limit}")


def _ce_phase(config: ModelConfig, params: ParamSet, corpus: Corpus, vocab: Vocabulary, cfg: DistillConfig,
              steps: int, label: str, monitor: Optional[Monitor] = None) -> Tuple[ParamSet, List[float]]:
    if steps == 0:
        if monitor is not None:
            monitor(0, params)
        return params, []
    stream = batches(corpus.train, vocab, cfg.batch, cfg.seq_len, cfg.seed)
    return _train_loop(config, params, stream, steps, _ce_loss, cfg, label, monitor)


def split_nll(config: ModelConfig, params: ParamSet, split: Sequence[str], vocab: Vocabulary,
              batch: int = 8, seq_len: int = 32) -> Tuple[float, int]:
    """Summed next-token NLL and scored-token count over one unshuffled pass"""
    total, count = 0.0, 0
    for b in eval_batches(split, vocab, batch, min(seq_len, config.max_seq_len)):
        s, n = nll_sum(forward(config, params, b.tokens).data, b.targets, b.mask)
        total += s
        count += n
    return total, count


def train_ce(ckpt: Checkpoint, corpus: Corpus, vocab: Optional[Vocabulary], cfg: DistillConfig,
             name: Optional[str] = None, eval_every: int = 0) -> Checkpoint:
    """cfg.steps of next-token cross-entropy on the corpus training split

    With eval_every > 0 the validation loss is measured at step 0, every
    eval_every steps and after the last step, and stored as eval_curve
    ([step, loss] pairs) next to the per-step training curve in the lineage.
    """
    vocab = resolve_vocab(ckpt.config, vocab)
    _check_seq_len(cfg, ckpt.config)
    label = name or ckpt.name or "train"
    eval_curve: List[List[float]] = []
    monitor = None
    if eval_every > 0:
        def monitor(step, params):
            if step % eval_every == 0 or step == cfg.steps:
                total, count = split_nll(ckpt.config, params, corpus.validation, vocab, cfg.batch, cfg.seq_len)
                eval_curve.append([step, total / count])
    params, curve = _ce_phase(ckpt.config, dict(ckpt.params), corpus, vocab, cfg, cfg.steps, label, monitor)
    details = {"steps": cfg.steps, "lr": cfg.lr, "curve": curve}
    if eval_every > 0:
        details["eval_curve"] = eval_curve
    meta = ckpt.meta.with_stage("trained:ce", name=name, step=ckpt.meta.step + cfg.steps, seed=cfg.seed, **details)
    return Checkpoint(ckpt.config, params, meta)


def sft_steps(corpus: Corpus, vocab: Vocabulary, cfg: DistillConfig) -> int:
    """Optimizer steps of the CE warm-up phase that precedes an edge's KL steps"""
    if cfg.sft_warm_epochs == 0:
        return 0
    return epoch_length(corpus.train, vocab, cfg.batch, cfg.seq_len) * cfg.sft_warm_epochs


def init_student(teacher: Checkpoint, student_config: ModelConfig, cfg: DistillConfig) -> ParamSet:
    if cfg.student_init == INIT_RANDOM:
        return init_random(student_config, cfg.seed, dtype=teacher.dtype)
    try:
        return dict(apply_transform(teacher, plan_subset(teacher.config, student_config)).params)
    except SurgeryError as e:
        raise DistillConfigError(f"subset initialization of {student_config} from the teacher: {e}")


def distill_edge(teacher: Checkpoint, student_config: ModelConfig, corpus: Corpus, cfg: DistillConfig,
                 vocab: Optional[Vocabulary] = None, name: str = "") -> Checkpoint:
    """One teacher -> student distillation edge

    The student starts from the subset transform of its teacher (or a random init
    when cfg.student_init is 'random'), optionally CE-warms for sft_warm_epochs
    over the corpus, then runs cfg.steps of cfg.loss_kind against the teacher's
    logits. With steps=0 the initialized student is returned untrained.
    """
    if teacher.config.vocab_size != student_config.vocab_size:
        raise VocabMismatchError(f"teacher vocabulary {teacher.config.vocab_size} != student {student_config.vocab_size}")
    vocab = resolve_vocab(teacher.config, vocab)
    _check_seq_len(cfg, teacher.config, student_config)
    name = name or f"student-{count_params(student_config)}"
    label = f"{teacher.name or 'teacher'}->{name}"
    params = init_student(teacher, student_config, cfg)
    sft_curve: List[float] = []
    curve: List[float] = []
    if cfg.steps > 0:
        params, sft_curve = _ce_phase(student_config, params, corpus, vocab, cfg,
                                      sft_steps(corpus, vocab, cfg), label + " sft")
        if cfg.loss_kind == CE:
            loss_fn = _ce_loss
        else:
            kl = KL_LOSSES[cfg.loss_kind]

            def loss_fn(logits, batch):
                target = teacher_logits(teacher, batch.tokens, cfg.workers)
                return kl(logits, target, batch.mask, cfg.temperature)

        stream = batches(corpus.train, vocab, cfg.batch, cfg.seq_len, cfg.seed + 1)
        params, curve = _train_loop(student_config, params, stream, cfg.steps, loss_fn, cfg, label)
    meta = teacher.meta.with_stage(
        f"distilled-from:{teacher.name or 'teacher'}", name=name, seed=cfg.seed,
        step=len(sft_curve) + len(curve), init=cfg.student_init, loss_kind=cfg.loss_kind,
        temperature=cfg.temperature, sft_steps=len(sft_curve), steps=len(curve), curve=curve)
    logger.info(f"{label}: {count_params(student_config)} params, final loss "
                f"{curve[-1] if curve else float('nan'):.4f}")
    return Checkpoint(student_config, params, meta)


def eval_divergence(teacher: Checkpoint, student: Checkpoint, split: Sequence[str], vocab: Optional[Vocabulary] = None,
                    batch: int = 8, seq_len: int = 32, kind: str = REVERSE_KL, temperature: float = 1.0) -> float:
    """Token-weighted validation KL of student against teacher"""
    if teacher.config.vocab_size != student.config.vocab_size:
        raise VocabMismatchError("teacher and student vocabularies differ")
    if kind not in KL_LOSSES:
        raise DistillConfigError(f"kind: expected reverse_kl or forward_kl, got {kind!r}")
    vocab = resolve_vocab(student.config, vocab)
    total, tokens = 0.0, 0
    for b in eval_batches(split, vocab, batch, seq_len):
        n = int(b.mask.sum())
        if n == 0:
            continue
        s = forward(student.config, student.params, b.tokens)
        t = forward(teacher.config, teacher.params, b.tokens).data
        total += KL_LOSSES[kind](s, t, b.mask, temperature).item() * n
        tokens += n
    if tokens == 0:
        raise DistillError("no scored positions in split")
    return total / tokens


# ---------------------------------------------------------------------------
# sequence-level distillation and the bridge
# ---------------------------------------------------------------------------

def _child_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(i)]).generate_state(1)[0])


def seqkd_generate(teacher: Checkpoint, vocab: Vocabulary, prompts: Sequence[str], temperature: float,
                   max_len: int, seed: int, greedy: bool = False, workers: int = 1) -> List[Tuple[str, str]]:
    """(prompt, completion) text pairs sampled from the teacher; prompt i uses a child seed of (seed, i)"""
    if not prompts:
        raise SeqKDError("empty prompt list")
    if not greedy and not temperature > 0:
        raise SeqKDError(f"temperature must be > 0, got {temperature}")
    if vocab.size != teacher.config.vocab_size:
        raise VocabMismatchError(f"tokenizer {vocab.name!r} does not match the teacher vocabulary")
    window = teacher.config.max_seq_len

    def generate(i):
        ids = encode(vocab, prompts[i], add_bos=True)[-window:]
        out = sample(teacher.config, teacher.params, ids, temperature, max_len, _child_seed(seed, i),
                     greedy=greedy, stop_id=EOS)
        return prompts[i], decode(vocab, out)

    if workers <= 1:
        return [generate(i) for i in range(len(prompts))]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(generate, range(len(prompts))))


def corpus_prompts(corpus: Corpus, n: int, chars: int, seed: int) -> List[str]:
    """n seeded prefixes of `chars` characters taken from training documents"""
    docs = [d for d in corpus.train if d]
    if not docs:
        raise SeqKDError("no training documents to draw prompts from")
    rng = np.random.default_rng(seed)
    prompts = []
    for _ in range(n):
        doc = docs[int(rng.integers(len(docs)))]
        start = int(rng.integers(0, max(1, len(doc) - chars)))
        prompts.append(doc[start:start + chars])
    return prompts


def pair_sequences(pairs: Sequence[Tuple[str, str]], vocab: Vocabulary) -> Tuple[List[List[int]], List[List[bool]]]:
    """BOS x y EOS with loss only on y and EOS"""
    sequences, masks = [], []
    for prompt, completion in pairs:
        x = encode(vocab, prompt, add_bos=True)
        y = encode(vocab, completion, add_eos=True)
        sequences.append(x + y)
        masks.append([False] * len(x) + [True] * len(y))
    return sequences, masks


def _train_on_pairs(config: ModelConfig, params: ParamSet, pairs: Sequence[Tuple[str, str]], vocab: Vocabulary,
                    cfg: DistillConfig, label: str) -> Tuple[ParamSet, List[float]]:
    sequences, masks = pair_sequences(pairs, vocab)
    stream = sequence_batches(sequences, cfg.batch, cfg.seq_len, cfg.seed, loss_masks=masks)
    return _train_loop(config, params, stream, cfg.steps, _ce_loss, cfg, label)


@dataclass(frozen=True)
class BridgeSpec:
    bridge_config: ModelConfig
    source_tokenizer: str = "byte"
    bridge_tokenizer: str = "char"
    n_samples: int = 64
    prompt_chars: int = 16
    gen_temperature: float = 1.0
    gen_max_len: int = 48
    seed: int = 0
    greedy: bool = False
    train: DistillConfig = field(default_factory=lambda: DistillConfig(loss_kind=CE, sft_warm_epochs=0))

    def __post_init__(self):
        if self.source_tokenizer == self.bridge_tokenizer:
            raise BridgeSpecError(f"source and bridge tokenizers must differ, both are {self.source_tokenizer!r}")
        try:
            vocab = get_tokenizer(self.bridge_tokenizer)
            get_tokenizer(self.source_tokenizer)
        except TokenizerError as e:
            raise BridgeSpecError(str(e))
        if vocab.size != self.bridge_config.vocab_size:
            raise BridgeSpecError(f"bridge_config.vocab_size {self.bridge_config.vocab_size} does not match "
                                  f"tokenizer {self.bridge_tokenizer!r} ({vocab.size})")
        if self.n_samples < 1 or self.prompt_chars < 1 or self.gen_max_len < 1:
            raise BridgeSpecError("n_samples, prompt_chars and gen_max_len must be >= 1")
        if not self.greedy and not self.gen_temperature > 0:
            raise BridgeSpecError(f"gen_temperature must be > 0, got {self.gen_temperature}")
        if self.prompt_chars + 1 > self.train.seq_len:
            raise BridgeSpecError(f"prompt_chars + 1 ({self.prompt_chars + 1}) exceeds train.seq_len {self.train.seq_len}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], where: str = "bridge") -> "BridgeSpec":
        _check_fields(cls, data, where)
        if "bridge_config" not in data:
            raise BridgeSpecError(f"{where}.bridge_config: required")
        values = dict(data)
        try:
            values["bridge_config"] = resolve_config(values["bridge_config"], f"{where}.bridge_config")
        except ModelError as e:
            raise BridgeSpecError(str(e))
        if "train" in values:
            values["train"] = DistillConfig.from_dict({"loss_kind": CE, "sft_warm_epochs": 0, **values["train"]},
                                                      f"{where}.train")
        try:
            return cls(**values)
        except TypeError as e:
            raise BridgeSpecError(f"{where}: {e}") from None

    def with_seed(self, seed: Optional[int]) -> "BridgeSpec":
        return self if seed is None else replace(self, seed=int(seed), train=self.train.with_seed(seed))


def run_bridge(spec: BridgeSpec, source: Checkpoint, corpus: Corpus, cfg: Optional[DistillConfig] = None) -> Checkpoint:
    """SeqKD from a source with a different tokenizer; the result is anchor zero of a chain"""
    cfg = cfg or spec.train
    src_vocab = get_tokenizer(spec.source_tokenizer)
    dst_vocab = get_tokenizer(spec.bridge_tokenizer)
    if src_vocab.size != source.config.vocab_size:
        raise BridgeError(f"source model vocabulary {source.config.vocab_size} does not match "
                          f"tokenizer {spec.source_tokenizer!r} ({src_vocab.size})")
    _check_seq_len(cfg, spec.bridge_config)
    prompts = corpus_prompts(corpus, spec.n_samples, spec.prompt_chars, spec.seed)
    try:
        pairs = seqkd_generate(source, src_vocab, prompts, spec.gen_temperature, spec.gen_max_len,
                               spec.seed, spec.greedy, cfg.workers)
    except (ModelError, NonFiniteError) as e:
        raise BridgeError(f"generation from {source.name or 'source'} failed: {e}") from e
    logger.info(f"bridge: {len(pairs)} pairs generated with {spec.source_tokenizer}, "
                f"re-encoding with {spec.bridge_tokenizer}")
    params = init_random(spec.bridge_config, cfg.seed, dtype=source.dtype)
    params, curve = _train_on_pairs(spec.bridge_config, params, pairs, dst_vocab, cfg, "bridge")
    meta = source.meta.with_stage(
        f"bridged-from:{source.name or 'source'}", name="bridge", seed=cfg.seed, step=len(curve),
        source_tokenizer=spec.source_tokenizer, bridge_tokenizer=spec.bridge_tokenizer,
        n_samples=len(pairs), curve=curve)
    return Checkpoint(spec.bridge_config, params, meta)


def run_seqkd_distill(teacher: Checkpoint, student_config: ModelConfig, corpus: Corpus, cfg: DistillConfig,
                      vocab: Optional[Vocabulary] = None, n_samples: int = 64, prompt_chars: int = 16,
                      gen_temperature: float = 1.0, gen_max_len: int = 48, name: str = "seqkd") -> Checkpoint:
    """Same-vocabulary SeqKD baseline: CE on teacher-sampled continuations"""
    if teacher.config.vocab_size != student_config.vocab_size:
        raise VocabMismatchError("SeqKD baseline needs a shared vocabulary")
    vocab = resolve_vocab(teacher.config, vocab)
    _check_seq_len(cfg, teacher.config, student_config)
    prompts = corpus_prompts(corpus, n_samples, prompt_chars, cfg.seed)
    pairs = seqkd_generate(teacher, vocab, prompts, gen_temperature, gen_max_len, cfg.seed, workers=cfg.workers)
    params = init_student(teacher, student_config, cfg)
    params, curve = _train_on_pairs(student_config, params, pairs, vocab, cfg, f"{teacher.name or 'teacher'}->{name}")
    meta = teacher.meta.with_stage(f"seqkd-from:{teacher.name or 'teacher'}", name=name, seed=cfg.seed,
                                   step=len(curve), init=cfg.student_init, steps=len(curve), curve=curve)
    return Checkpoint(student_config, params, meta)


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------

SourceRef = Union[str, Mapping[str, Any], Checkpoint, None]


@dataclass
class ChainSpec:
    """Ordered anchors (descending size), one DistillConfig per edge, optional bridge"""
    anchors: List[ModelConfig]
    edges: List[DistillConfig]
    source: SourceRef = None
    bridge: Optional[BridgeSpec] = None
    names: Optional[List[str]] = None
    tokenizer: str = "byte"

    def __post_init__(self):
        if not self.anchors:
            raise ChainSpecError("anchors: at least one anchor is required")
        if len(self.edges) != len(self.anchors):
            raise ChainSpecError(f"edges: expected {len(self.anchors)} entries (one per anchor), got {len(self.edges)}")
        sizes = [count_params(a) for a in self.anchors]
        for k in range(1, len(sizes)):
            if sizes[k] >= sizes[k - 1]:
                raise ChainSpecError(f"anchors[{k}]: {sizes[k]} params is not below anchors[{k - 1}] ({sizes[k - 1]})")
            if not self.anchors[k].structurally_le(self.anchors[k - 1]):
                raise ChainSpecError(f"anchors[{k}]: not structurally nested in anchors[{k - 1}]")
        if self.bridge is not None:
            top = self.bridge.bridge_config
            if count_params(top) <= sizes[0] or not self.anchors[0].structurally_le(top):
                raise ChainSpecError("bridge.bridge_config: must be larger than and nest anchors[0]")
            self.tokenizer = self.bridge.bridge_tokenizer
        if self.names is None:
            self.names = [f"anchor-{k + 1}" for k in range(len(self.anchors))]
        if len(self.names) != len(self.anchors):
            raise ChainSpecError("names: one name per anchor is required")
        try:
            vocab = get_tokenizer(self.tokenizer)
        except TokenizerError as e:
            raise ChainSpecError(f"tokenizer: {e}")
        for k, a in enumerate(self.anchors):
            if a.vocab_size != vocab.size:
                raise ChainSpecError(f"anchors[{k}].vocab_size: {a.vocab_size} does not match tokenizer "
                                     f"{self.tokenizer!r} ({vocab.size})")

    @property
    def vocab(self) -> Vocabulary:
        return get_tokenizer(self.tokenizer)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], seed: Optional[int] = None) -> "ChainSpec":
        if not isinstance(data, Mapping):
            raise ChainSpecError("chain: expected an object")
        if not isinstance(data.get("anchors"), list):
            raise ChainSpecError("anchors: required list of model configs")
        if not isinstance(data.get("edges"), list):
            raise ChainSpecError("edges: required list of distillation settings")
        try:
            anchors = [resolve_config(a, f"anchors[{k}]") for k, a in enumerate(data["anchors"])]
        except ModelError as e:
            raise ChainSpecError(str(e))
        edges = [DistillConfig.from_dict(e, f"edges[{k}]").with_seed(seed) for k, e in enumerate(data["edges"])]
        bridge = data.get("bridge")
        if bridge is not None:
            bridge = BridgeSpec.from_dict(bridge).with_seed(seed)
        source = data.get("source")
        if source is not None:
            if not isinstance(source, Mapping) or not ({"path", "recipe"} & set(source)):
                raise ChainSpecError("source: expected {\"path\": ...} or {\"recipe\": {...}}")
            if "recipe" in source and seed is not None:
                source = {"recipe": {**source["recipe"], "seed": int(seed)}}
        return cls(anchors, edges, source, bridge, data.get("names"), data.get("tokenizer", "byte"))


def build_source(recipe: Mapping[str, Any], corpus: Corpus, vocab: Optional[Vocabulary] = None) -> Checkpoint:
    """Train a source model by CE from a random init: {config, steps, lr, seed, batch, seq_len}"""
    if "config" not in recipe:
        raise ChainSpecError("source.recipe.config: required")
    try:
        config = resolve_config(recipe["config"], "source.recipe.config")
    except ModelError as e:
        raise ChainSpecError(str(e))
    settings = {k: v for k, v in recipe.items() if k != "config"}
    cfg = DistillConfig.from_dict({"loss_kind": CE, "sft_warm_epochs": 0, **settings}, "source.recipe")
    ckpt = Checkpoint(config, init_random(config, cfg.seed), Provenance(name="source", seed=cfg.seed))
    return train_ce(ckpt, corpus, vocab, cfg, name="source")


def resolve_source(ref: SourceRef, corpus: Corpus, vocab: Optional[Vocabulary] = None) -> Checkpoint:
    if isinstance(ref, Checkpoint):
        return ref
    if isinstance(ref, str):
        return load(ref)
    if isinstance(ref, Mapping) and "path" in ref:
        return load(ref["path"])
    if isinstance(ref, Mapping) and "recipe" in ref:
        return build_source(ref["recipe"], corpus, vocab)
    raise ChainSpecError("source: no checkpoint path or recipe given")


def run_stepwise_chain(spec: ChainSpec, corpus: Corpus, source: Optional[Checkpoint] = None,
                       out_dir: Optional[str] = None) -> List[Checkpoint]:
    """Distill source -> A_1 -> ... -> A_M, each anchor from its predecessor"""
    vocab = spec.vocab
    teacher = source if source is not None else resolve_source(spec.source, corpus, vocab)
    if spec.edges[0].student_init == INIT_SUBSET and not spec.anchors[0].structurally_le(teacher.config):
        raise ChainSpecError("anchors[0]: not structurally nested in the source model")
    anchors: List[Checkpoint] = []
    for k, (config, cfg) in enumerate(zip(spec.anchors, spec.edges)):
        name = spec.names[k]
        logger.info(f"chain edge {k}: {teacher.name or 'source'} ({count_params(teacher.config)}) -> "
                    f"{name} ({count_params(config)})")
        try:
            student = distill_edge(teacher, config, corpus, cfg, vocab, name)
        except (DistillError, ModelError, SurgeryError) as e:
            raise ChainEdgeError(k, teacher.name or "source", name, e) from e
        if out_dir:
            save(student, os.path.join(out_dir, f"anchor_{k + 1}.cbdc"))
        anchors.append(student)
        teacher = student
    return anchors


def run_chain(spec: ChainSpec, corpus: Corpus, out_dir: Optional[str] = None) -> Tuple[Optional[Checkpoint], List[Checkpoint]]:
    """Bridge (when configured) then the stepwise chain; returns (bridge, anchors)"""
    if spec.bridge is None:
        return None, run_stepwise_chain(spec, corpus, out_dir=out_dir)
    source = resolve_source(spec.source, corpus, get_tokenizer(spec.bridge.source_tokenizer))
    bridge = run_bridge(spec.bridge, source, corpus)
    if out_dir:
        save(bridge, os.path.join(out_dir, "bridge.cbdc"))
    return bridge, run_stepwise_chain(spec, corpus, source=bridge, out_dir=out_dir)


def run_direct_distill(source: Checkpoint, target_config: ModelConfig, corpus: Corpus, cfg: DistillConfig,
                       vocab: Optional[Vocabulary] = None, name: str = "direct") -> Checkpoint:
    """The single-edge baseline source -> target"""
    return distill_edge(source, target_config, corpus, cfg, vocab, name)
