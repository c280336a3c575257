"""
Text normalization and the word-level vocabulary shared by training, decoding
and evaluation.
"""

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

from ..errors import InvalidParameterError

logger = logging.getLogger(__name__)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


def normalize(text: str) -> List[str]:
    """Lowercase, drop punctuation, split into word tokens."""
    return _TOKEN_RE.findall(text.lower())


def whitespace_tokens(text: str) -> List[str]:
    """Case-preserving tokens with surrounding punctuation stripped; used for keyword matching."""
    return [tok.strip(".,;:!?()[]\"'") for tok in text.split() if tok.strip(".,;:!?()[]\"'")]


@dataclass
class Vocabulary:
    tokens: List[str] = field(default_factory=lambda: list(SPECIAL_TOKENS))

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise InvalidParameterError("vocabulary must start with the reserved special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise InvalidParameterError("vocabulary contains duplicate tokens")
        self._index: Dict[str, int] = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts = Counter(tok for text in texts for tok in normalize(text))
        # frequency first, then alphabetical, so rebuilding from the same corpus is stable
        words = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        vocab = cls(tokens=list(SPECIAL_TOKENS) + words)
        logger.info(f"Built vocabulary: {len(vocab)} tokens from {sum(counts.values())} words")
        return vocab

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def encode(self, text: str, add_eos: bool = False) -> List[int]:
        ids = [self.id_of(tok) for tok in normalize(text)]
        return ids + [EOS_ID] if add_eos else ids

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            words.append(self.tokens[i] if 0 <= i < len(self.tokens) else SPECIAL_TOKENS[UNK_ID])
        return " ".join(words)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps({"tokens": self.tokens}, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        return cls(tokens=json.loads(Path(path).read_text(encoding="utf-8"))["tokens"])


def contains_keyword(text: str, keywords: Optional[Iterable[str]] = None) -> bool:
    """Case-sensitive whole-token match against any of the keywords."""
    wanted = set(keywords or ("Note",))
    return any(tok in wanted for tok in whitespace_tokens(text))
