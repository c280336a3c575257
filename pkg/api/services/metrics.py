"""
Corpus metrics for generated reports: BLEU-1..4, ROUGE-L, METEOR (exact and
stem matching, no synonym tables) and CIDEr-D.

All inputs go through text.normalize so training and evaluation share one
tokenization.
"""

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from nltk.stem.porter import PorterStemmer

from ..errors import DegenerateIdfError, InvalidParameterError
from .text import normalize

logger = logging.getLogger(__name__)

_stemmer = PorterStemmer()


@dataclass
class EvalPair:
    sample_id: str
    hypothesis: List[str]
    references: List[List[str]]

    def __post_init__(self):
        if not self.references:
            raise InvalidParameterError(f"{self.sample_id}: at least one reference is required")

    @classmethod
    def from_text(cls, sample_id: str, hypothesis: str, references: Union[str, Sequence[str]]) -> "EvalPair":
        if isinstance(references, str):
            references = [references]
        return cls(sample_id, normalize(hypothesis), [normalize(r) for r in references])


@dataclass
class MetricReport:
    bleu: Tuple[float, float, float, float]
    rouge_l: float
    meteor: float
    cider: float
    corpus_size: int
    config: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "BLEU-1": self.bleu[0],
            "BLEU-2": self.bleu[1],
            "BLEU-3": self.bleu[2],
            "BLEU-4": self.bleu[3],
            "ROUGE-L": self.rouge_l,
            "METEOR": self.meteor,
            "CIDEr": self.cider,
            "corpus_size": self.corpus_size,
            "config": self.config,
        }

    def table(self) -> str:
        d = self.to_dict()
        keys = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "METEOR", "CIDEr"]
        header = " | ".join(f"{k:>7}" for k in keys)
        row = " | ".join(f"{d[k]:7.4f}" for k in keys)
        return f"{header}\n{row}"


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _require_corpus(corpus: Sequence[EvalPair]) -> None:
    if not corpus:
        raise InvalidParameterError("cannot score an empty corpus")


# BLEU


def _clipped_counts(hypothesis: Sequence[str], references: Sequence[Sequence[str]], n: int) -> Tuple[int, int]:
    counts = ngrams(hypothesis, n)
    max_ref: Counter = Counter()
    for ref in references:
        max_ref |= ngrams(ref, n)
    return sum(min(c, max_ref[g]) for g, c in counts.items()), sum(counts.values())


def modified_precision(hypothesis: Sequence[str], references: Sequence[Sequence[str]], n: int) -> Fraction:
    """Clipped n-gram matches over hypothesis n-grams (0/0 is reported as 0)."""
    clipped, total = _clipped_counts(hypothesis, references, n)
    return Fraction(clipped, total) if total else Fraction(0)


def brevity_penalty(hyp_length: int, ref_length: int) -> float:
    if hyp_length == 0:
        return 0.0
    return 1.0 if hyp_length >= ref_length else math.exp(1 - ref_length / hyp_length)


def _closest_ref_length(hyp_len: int, references: Sequence[Sequence[str]]) -> int:
    return min((abs(len(r) - hyp_len), len(r)) for r in references)[1]


def bleu(corpus: Sequence[EvalPair], max_n: int = 4) -> List[float]:
    """Corpus BLEU-1..max_n: pooled clipped precisions, geometric mean, brevity penalty."""
    _require_corpus(corpus)
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for pair in corpus:
        hyp_len += len(pair.hypothesis)
        ref_len += _closest_ref_length(len(pair.hypothesis), pair.references)
        for n in range(1, max_n + 1):
            clipped, total = _clipped_counts(pair.hypothesis, pair.references, n)
            matches[n - 1] += clipped
            totals[n - 1] += total

    bp = brevity_penalty(hyp_len, ref_len)
    scores = []
    log_sum = 0.0
    for n in range(1, max_n + 1):
        if matches[n - 1] == 0 or totals[n - 1] == 0:
            # every higher order inherits a zero precision
            scores.extend([0.0] * (max_n - n + 1))
            break
        log_sum += math.log(matches[n - 1] / totals[n - 1])
        scores.append(bp * math.exp(log_sum / n))
    return scores


# ROUGE-L


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_pair(hypothesis: Sequence[str], references: Sequence[Sequence[str]], beta: float = 1.2) -> Tuple[float, float, float]:
    """(P, R, F) with the best precision and best recall over references, as caption toolkits do."""
    precision = recall = 0.0
    for ref in references:
        lcs = lcs_length(hypothesis, ref)
        if hypothesis:
            precision = max(precision, lcs / len(hypothesis))
        if ref:
            recall = max(recall, lcs / len(ref))
    if precision == 0 or recall == 0:
        return precision, recall, 0.0
    f = (1 + beta**2) * precision * recall / (recall + beta**2 * precision)
    return precision, recall, f


def rouge_l(corpus: Sequence[EvalPair], beta: float = 1.2) -> float:
    _require_corpus(corpus)
    return sum(rouge_l_pair(p.hypothesis, p.references, beta)[2] for p in corpus) / len(corpus)


# METEOR


def _align(hypothesis: Sequence[str], reference: Sequence[str]) -> List[Tuple[int, int]]:
    """Greedy exact matches first, then Porter-stem matches among the leftovers."""
    used_h, used_r = set(), set()
    pairs = []
    for key in (lambda w: w, _stemmer.stem):
        ref_keys = [key(w) for w in reference]
        for i, word in enumerate(hypothesis):
            if i in used_h:
                continue
            k = key(word)
            for j, rk in enumerate(ref_keys):
                if j not in used_r and rk == k:
                    used_h.add(i)
                    used_r.add(j)
                    pairs.append((i, j))
                    break
    return sorted(pairs)


def _count_chunks(alignment: List[Tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in alignment:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_pair(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    alignment = _align(hypothesis, reference)
    matches = len(alignment)
    if matches == 0:
        return 0.0
    precision = matches / len(hypothesis)
    recall = matches / len(reference)
    f_mean = 10 * precision * recall / (recall + 9 * precision)
    penalty = 0.5 * (_count_chunks(alignment) / matches) ** 3
    return f_mean * (1 - penalty)


def meteor(corpus: Sequence[EvalPair]) -> float:
    _require_corpus(corpus)
    return sum(max(meteor_pair(p.hypothesis, r) for r in p.references) for p in corpus) / len(corpus)


# CIDEr-D


def _tfidf(counts: Counter, df: Counter, log_n: float) -> Tuple[Dict[Tuple[str, ...], float], float]:
    vec = {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in counts.items()}
    return vec, math.sqrt(sum(v * v for v in vec.values()))


def _similarity(
    hyp: Dict, hyp_norm: float, ref: Dict, ref_norm: float, length_delta: int, sigma: float, clipped: bool
) -> float:
    if hyp_norm == 0 or ref_norm == 0:
        return 0.0
    if clipped:
        dot = sum(min(v, ref.get(g, 0.0)) * ref.get(g, 0.0) for g, v in hyp.items())
        penalty = math.exp(-(length_delta**2) / (2 * sigma**2))
    else:
        dot = sum(v * ref.get(g, 0.0) for g, v in hyp.items())
        penalty = 1.0
    return dot / (hyp_norm * ref_norm) * penalty


def cider_scores(
    corpus: Sequence[EvalPair], max_n: int = 4, sigma: float = 6.0, clipped: bool = True
) -> List[float]:
    """Per-sample CIDEr-D (clipped=False gives plain CIDEr), each in [0, 10]."""
    _require_corpus(corpus)
    if len(corpus) < 2:
        raise DegenerateIdfError("document frequencies need a corpus of at least two samples")
    log_n = math.log(len(corpus))
    df: List[Counter] = []
    for n in range(1, max_n + 1):
        counts: Counter = Counter()
        for pair in corpus:
            counts.update(set().union(*(ngrams(r, n).keys() for r in pair.references)))
        df.append(counts)

    scores = []
    for pair in corpus:
        total = 0.0
        for n in range(1, max_n + 1):
            hyp_vec, hyp_norm = _tfidf(ngrams(pair.hypothesis, n), df[n - 1], log_n)
            sims = []
            for ref in pair.references:
                ref_vec, ref_norm = _tfidf(ngrams(ref, n), df[n - 1], log_n)
                sims.append(
                    _similarity(hyp_vec, hyp_norm, ref_vec, ref_norm, len(pair.hypothesis) - len(ref), sigma, clipped)
                )
            total += sum(sims) / len(sims)
        scores.append(10.0 * total / max_n)
    return scores


def cider(corpus: Sequence[EvalPair], sigma: float = 6.0, clipped: bool = True) -> float:
    scores = cider_scores(corpus, sigma=sigma, clipped=clipped)
    return sum(scores) / len(scores)


def evaluate_corpus(
    corpus: Sequence[EvalPair], beta: float = 1.2, sigma: float = 6.0, cider_d: bool = True
) -> MetricReport:
    _require_corpus(corpus)
    b = bleu(corpus, 4)
    report = MetricReport(
        bleu=tuple(b),
        rouge_l=rouge_l(corpus, beta),
        meteor=meteor(corpus),
        cider=cider(corpus, sigma=sigma, clipped=cider_d),
        corpus_size=len(corpus),
        config={"rouge_beta": beta, "cider_sigma": sigma, "cider_d": cider_d, "meteor": "exact+porter"},
    )
    logger.info(f"Scored {len(corpus)} samples: BLEU-4 {report.bleu[3]:.4f}, CIDEr {report.cider:.4f}")
    return report


def load_results(path: Union[str, Path]) -> List[EvalPair]:
    """Read a results.json written by report generation."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    rows = payload["data"] if isinstance(payload, dict) else payload
    return [EvalPair.from_text(row["id"], row["hypothesis"], row["reference"]) for row in rows]


def save_report(report: MetricReport, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
