# backend/tokenizer.py
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
UNK_TEXT = "?"

# newline plus printable ASCII 0x20..0x7e
CHAR_ALPHABET = "\n" + "".join(chr(c) for c in range(0x20, 0x7F))


class TokenizerError(Exception):
    """Base error for vocabularies"""


class TokenIdError(TokenizerError, ValueError):
    pass


class VocabFileError(TokenizerError):
    pass


def _byte_token(b: int) -> str:
    return f"<0x{b:02X}>"


@dataclass(frozen=True)
class Vocabulary:
    """id <-> token tables; kind is 'byte' (one id per byte) or 'char' (printable ASCII)"""
    name: str
    kind: str
    tokens: Tuple[str, ...]
    token_to_id: Dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("byte", "char"):
            raise TokenizerError(f"unknown vocabulary kind {self.kind!r}")
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise TokenizerError("the first four ids must be <pad>, <bos>, <eos>, <unk>")
        table = {tok: i for i, tok in enumerate(self.tokens)}
        if len(table) != len(self.tokens):
            raise TokenizerError(f"vocabulary {self.name!r} contains duplicate tokens")
        object.__setattr__(self, "token_to_id", table)

    @property
    def size(self) -> int:
        return len(self.tokens)

    pad_id = PAD
    bos_id = BOS
    eos_id = EOS
    unk_id = UNK

    def is_special(self, i: int) -> bool:
        return i < len(SPECIAL_TOKENS)


def byte_vocab() -> Vocabulary:
    return Vocabulary("byte", "byte", SPECIAL_TOKENS + tuple(_byte_token(b) for b in range(256)))


def char_vocab() -> Vocabulary:
    return Vocabulary("char", "char", SPECIAL_TOKENS + tuple(CHAR_ALPHABET))


_REGISTRY = {"byte": byte_vocab, "char": char_vocab}
_CACHE: Dict[str, Vocabulary] = {}


def get_tokenizer(name: str) -> Vocabulary:
    if name not in _REGISTRY:
        raise TokenizerError(f"unknown tokenizer {name!r}, expected one of {sorted(_REGISTRY)}")
    if name not in _CACHE:
        _CACHE[name] = _REGISTRY[name]()
    return _CACHE[name]


def tokenizer_for_size(vocab_size: int) -> Vocabulary:
    """Registered vocabulary whose size matches a model's vocab_size"""
    for name in sorted(_REGISTRY):
        vocab = get_tokenizer(name)
        if vocab.size == vocab_size:
            return vocab
    raise TokenizerError(f"no registered tokenizer has {vocab_size} tokens")


def encode(vocab: Vocabulary, text: str, add_bos: bool = False, add_eos: bool = False) -> List[int]:
    ids = [BOS] if add_bos else []
    table = vocab.token_to_id
    if vocab.kind == "byte":
        ids.extend(table[_byte_token(b)] for b in text.encode("utf-8"))
    else:
        ids.extend(table.get(ch, UNK) for ch in text)
    if add_eos:
        ids.append(EOS)
    return ids


def decode(vocab: Vocabulary, ids: Sequence[int]) -> str:
    """Inverse of encode on its image; specials render empty, UNK renders '?'"""
    pieces: List[str] = []
    pending = bytearray()
    for i in ids:
        i = int(i)
        if i < 0 or i >= vocab.size:
            raise TokenIdError(f"token id {i} outside vocabulary {vocab.name!r} of size {vocab.size}")
        if vocab.kind == "byte" and i >= len(SPECIAL_TOKENS):
            pending.append(int(vocab.tokens[i][3:5], 16))
            continue
        if pending:
            pieces.append(pending.decode("utf-8", errors="replace"))
            pending = bytearray()
        if i == UNK:
            pieces.append(UNK_TEXT)
        elif i >= len(SPECIAL_TOKENS):
            pieces.append(vocab.tokens[i])
    if pending:
        pieces.append(pending.decode("utf-8", errors="replace"))
    return "".join(pieces)


def shared_ids_differ(a: Vocabulary, b: Vocabulary) -> bool:
    """True when no printable character maps to the same id in both vocabularies"""
    for ch in CHAR_ALPHABET:
        ia, ib = encode(a, ch), encode(b, ch)
        if ia == ib:
            return False
    return a.size != b.size


def save_vocab(vocab: Vocabulary, path: str):
    """One token per line, line number = id (tokens unicode-escaped)"""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tok in vocab.tokens:
            fh.write(tok.encode("unicode_escape").decode("ascii") + "\n")


def load_vocab(path: str, name: str = None) -> Vocabulary:
    try:
        with open(path, "r", encoding="utf-8", newline="\n") as fh:
            lines = fh.read().split("\n")
    except OSError as e:
        raise VocabFileError(f"cannot read vocabulary {path}: {e}")
    if lines and lines[-1] == "":
        lines.pop()
    tokens = tuple(line.encode("ascii").decode("unicode_escape") for line in lines)
    body = tokens[len(SPECIAL_TOKENS):]
    kind = "byte" if body and all(t.startswith("<0x") and t.endswith(">") and len(t) == 6 for t in body) else "char"
    try:
        return Vocabulary(name or kind, kind, tokens)
    except TokenizerError as e:
        raise VocabFileError(f"{path}: {e}")
