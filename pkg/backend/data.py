# backend/data.py
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .tokenizer import PAD, Vocabulary, encode

logger = logging.getLogger(__name__)

DEFAULT_ALPHABET = "abcdefgh "
TRAIN, VALIDATION = "train", "validation"


class DataError(Exception):
    """Base error for corpora and batching"""


class EmptySplitError(DataError, ValueError):
    pass


class CorpusSpecError(DataError, ValueError):
    pass


@dataclass
class Corpus:
    """Documents plus a seeded, disjoint train/validation split"""
    documents: List[str]
    split_ratio: float = 0.9
    seed: int = 0
    source: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.split_ratio <= 1.0:
            raise CorpusSpecError(f"split_ratio must lie in (0, 1], got {self.split_ratio}")
        n = len(self.documents)
        order = np.random.default_rng(self.seed).permutation(n)
        n_val = 0 if n < 2 else min(n - 1, max(1, int(round(n * (1.0 - self.split_ratio)))))
        if self.split_ratio == 1.0:
            n_val = 0
        val_idx = set(int(i) for i in order[:n_val])
        self._train = [d for i, d in enumerate(self.documents) if i not in val_idx]
        self._validation = [d for i, d in enumerate(self.documents) if i in val_idx]

    @property
    def train(self) -> List[str]:
        return self._train

    @property
    def validation(self) -> List[str]:
        return self._validation

    def split(self, name: str) -> List[str]:
        if name == TRAIN:
            return self.train
        if name in (VALIDATION, "val"):
            return self.validation
        raise CorpusSpecError(f"unknown split {name!r}")


def gen_markov(seed: int, n_docs: int, doc_len: int, order: int = 2, alphabet: str = DEFAULT_ALPHABET,
               concentration: float = 0.3, split_ratio: float = 0.9) -> Corpus:
    """Seeded order-k Markov text with a Dirichlet-drawn (non-uniform) transition table"""
    if order < 1:
        raise CorpusSpecError(f"order must be >= 1, got {order}")
    if len(alphabet) < 2 or len(set(alphabet)) != len(alphabet):
        raise CorpusSpecError("alphabet needs at least two distinct symbols")
    rng = np.random.default_rng(seed)
    k = len(alphabet)
    table = rng.dirichlet(np.full(k, concentration), size=k ** order)
    cumulative = np.cumsum(table, axis=1)
    docs = []
    for _ in range(n_docs):
        state = [int(s) for s in rng.integers(0, k, size=order)]
        out = state[:doc_len]
        while len(out) < doc_len:
            ctx = 0
            for s in state:
                ctx = ctx * k + s
            nxt = int(np.searchsorted(cumulative[ctx], rng.random(), side="right"))
            nxt = min(nxt, k - 1)
            out.append(nxt)
            state = state[1:] + [nxt]
        docs.append("".join(alphabet[i] for i in out))
    params = {"n_docs": n_docs, "doc_len": doc_len, "order": order, "alphabet": alphabet}
    return Corpus(docs, split_ratio, seed, {"kind": "markov", "seed": seed, "params": params})


def gen_arithmetic(seed: int, n_docs: int, max_operand: int = 99, split_ratio: float = 0.9) -> Corpus:
    """Lines 'a+b=c\\n' with correct sums"""
    if max_operand < 1:
        raise CorpusSpecError(f"max_operand must be >= 1, got {max_operand}")
    rng = np.random.default_rng(seed)
    pairs = rng.integers(0, max_operand + 1, size=(n_docs, 2))
    docs = [f"{a}+{b}={a + b}\n" for a, b in pairs.tolist()]
    params = {"n_docs": n_docs, "max_operand": max_operand}
    return Corpus(docs, split_ratio, seed, {"kind": "arithmetic", "seed": seed, "params": params})


def load_text(path: str, split_ratio: float = 0.9, seed: int = 0) -> Corpus:
    """UTF-8 file, one document per blank-line separated block"""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise CorpusSpecError(f"cannot read corpus {path}: {e}")
    docs, block = [], []
    for line in text.splitlines():
        if line.strip():
            block.append(line)
        elif block:
            docs.append("\n".join(block))
            block = []
    if block:
        docs.append("\n".join(block))
    if not docs:
        raise EmptySplitError(f"{path} contains no documents")
    return Corpus(docs, split_ratio, seed, {"kind": "text", "seed": seed, "path": os.path.abspath(path)})


def build_corpus(spec: Mapping[str, Any], seed: Optional[int] = None) -> Corpus:
    """Corpus from {kind, seed, params | path}; an explicit seed overrides the mapping's"""
    if not isinstance(spec, Mapping) or "kind" not in spec:
        raise CorpusSpecError("corpus: expected an object with a 'kind' field")
    kind = spec["kind"]
    seed = int(spec.get("seed", 0)) if seed is None else int(seed)
    params = dict(spec.get("params", {}))
    split_ratio = float(spec.get("split_ratio", 0.9))
    try:
        if kind == "markov":
            return gen_markov(seed, split_ratio=split_ratio, **params)
        if kind == "arithmetic":
            return gen_arithmetic(seed, split_ratio=split_ratio, **params)
    except TypeError as e:
        raise CorpusSpecError(f"corpus.params: {e}")
    if kind == "text":
        if "path" not in spec:
            raise CorpusSpecError("corpus.path: required for kind 'text'")
        return load_text(spec["path"], split_ratio, seed)
    raise CorpusSpecError(f"corpus.kind: unknown kind {kind!r} (expected markov, arithmetic or text)")


class Batch(NamedTuple):
    tokens: np.ndarray
    targets: np.ndarray
    mask: np.ndarray


def _windows(sequences: Sequence[Sequence[int]], loss_masks: Optional[Sequence[Sequence[bool]]],
             seq_len: int) -> List[tuple]:
    windows = []
    for k, seq in enumerate(sequences):
        seq = list(seq)
        lm = list(loss_masks[k]) if loss_masks is not None else [True] * len(seq)
        if len(seq) < 2:
            continue
        for start in range(0, len(seq) - 1, seq_len):
            chunk = seq[start:start + seq_len + 1]
            weights = lm[start + 1:start + seq_len + 1]
            if len(chunk) >= 2 and any(weights[:len(chunk) - 1]):
                windows.append((chunk, weights))
    return windows


def _assemble(rows: List[tuple], seq_len: int) -> Batch:
    tokens = np.full((len(rows), seq_len), PAD, dtype=np.int64)
    targets = np.full((len(rows), seq_len), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), seq_len), dtype=bool)
    for r, (chunk, weights) in enumerate(rows):
        n = len(chunk) - 1
        tokens[r, :n] = chunk[:-1]
        targets[r, :n] = chunk[1:]
        mask[r, :n] = np.asarray(weights[:n], dtype=bool) & (np.asarray(chunk[1:]) != PAD)
    return Batch(tokens, targets, mask)


def sequence_batches(sequences: Sequence[Sequence[int]], batch: int, seq_len: int, seed: int,
                     loss_masks: Optional[Sequence[Sequence[bool]]] = None, epochs: Optional[int] = None,
                     shuffle: bool = True) -> Iterator[Batch]:
    """Windows of seq_len+1 tokens -> (tokens, next-token targets, mask), reshuffled each epoch"""
    if seq_len < 2:
        raise DataError(f"seq_len must be >= 2, got {seq_len}")
    if batch < 1:
        raise DataError(f"batch must be >= 1, got {batch}")
    windows = _windows(sequences, loss_masks, seq_len)
    if not windows:
        raise EmptySplitError("no trainable windows in split")
    return _stream(windows, batch, seq_len, seed, epochs, shuffle)


def _stream(windows: List[tuple], batch: int, seq_len: int, seed: int, epochs: Optional[int],
            shuffle: bool) -> Iterator[Batch]:
    epoch = 0
    while epochs is None or epoch < epochs:
        if shuffle:
            order = np.random.default_rng([seed, epoch]).permutation(len(windows))
        else:
            order = np.arange(len(windows))
        for start in range(0, len(order), batch):
            yield _assemble([windows[i] for i in order[start:start + batch]], seq_len)
        epoch += 1


def encode_documents(documents: Sequence[str], vocab: Vocabulary) -> List[List[int]]:
    return [encode(vocab, doc, add_bos=True, add_eos=True) for doc in documents]


def batches(split: Sequence[str], vocab: Vocabulary, batch: int, seq_len: int, seed: int,
            epochs: Optional[int] = None) -> Iterator[Batch]:
    """Deterministic training stream over a document split"""
    if not split:
        raise EmptySplitError("empty split")
    return sequence_batches(encode_documents(split, vocab), batch, seq_len, seed, epochs=epochs)


def eval_batches(split: Sequence[str], vocab: Vocabulary, batch: int, seq_len: int) -> List[Batch]:
    """Single unshuffled pass over a split"""
    if not split:
        raise EmptySplitError("empty split")
    return list(sequence_batches(encode_documents(split, vocab), batch, seq_len, 0, epochs=1, shuffle=False))


def epoch_length(split: Sequence[str], vocab: Vocabulary, batch: int, seq_len: int) -> int:
    """Number of batches in one pass"""
    n = len(_windows(encode_documents(split, vocab), None, seq_len))
    return (n + batch - 1) // batch
