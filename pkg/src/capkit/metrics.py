"""Sentence-level caption metrics (BLEU, GLEU, METEOR, ROUGE-L) and corpus reports.

All metrics take a candidate token sequence and one or more reference token
sequences and return a score in [0, 1].
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

log = logging.getLogger(__name__)

Tokens = Sequence[str]

# Search-state cap for the exact minimum-chunk METEOR alignment. Beyond it the
# alignment falls back to a greedy chunk-extending match.
MAX_ALIGNMENT_STATES = 200_000


class EmptyCorpus(ValueError):
    pass


@dataclass(frozen=True)
class MetricConfig:
    max_n: int = 4
    alpha: float = 0.9
    gamma: float = 0.5
    beta_exp: float = 3.0
    rouge_beta: float = 1.0
    synonyms: Mapping[str, frozenset] = field(default_factory=dict)

    def __post_init__(self):
        if self.max_n < 1:
            raise ValueError("max_n must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.beta_exp < 1.0:
            raise ValueError("beta_exp must be >= 1")
        if self.rouge_beta <= 0.0:
            raise ValueError("rouge_beta must be positive")


DEFAULT_CONFIG = MetricConfig()


@dataclass(frozen=True)
class SentencePair:
    candidate: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "candidate", tuple(self.candidate))
        object.__setattr__(self, "references", tuple(tuple(r) for r in self.references))
        if not self.references:
            raise ValueError("a sentence pair needs at least one reference")


@dataclass(frozen=True)
class NgramStats:
    order: int
    clipped_matches: int
    candidate_total: int
    reference_total: int


@dataclass(frozen=True)
class MeteorComputation:
    matches: int
    precision: float
    recall: float
    f_mean: float
    chunks: int
    penalty: float

    @property
    def score(self) -> float:
        return self.f_mean * (1.0 - self.penalty)


def load_synonyms(path) -> dict[str, frozenset]:
    """Read a synonym table: one ``token<TAB>syn1,syn2,...`` line per entry."""
    table: dict[str, set] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        head, _, rest = line.partition("\t")
        syns = {s.strip() for s in rest.split(",") if s.strip()}
        table.setdefault(head.strip(), set()).update(syns)
    return {k: frozenset(v) for k, v in table.items()}


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _as_pair(candidate, references) -> SentencePair:
    if isinstance(candidate, SentencePair):
        return candidate
    return SentencePair(candidate, references)


# --------------------------------------------------------------------- BLEU


def closest_reference_length(candidate_len: int, references: Sequence[Tokens]) -> int:
    return min((abs(len(r) - candidate_len), len(r)) for r in references)[1]


def bleu_stats(pair: SentencePair, max_n: int = 4) -> list[NgramStats]:
    ref_len = closest_reference_length(len(pair.candidate), pair.references)
    stats = []
    for n in range(1, max_n + 1):
        cand = ngrams(pair.candidate, n)
        max_ref: Counter = Counter()
        for ref in pair.references:
            max_ref |= ngrams(ref, n)
        clipped = sum(min(c, max_ref[g]) for g, c in cand.items())
        stats.append(NgramStats(n, clipped, sum(cand.values()), max(ref_len - n + 1, 0)))
    return stats


def bleu(candidate, references=None, config: MetricConfig = DEFAULT_CONFIG) -> float:
    """Clipped n-gram precision geometric mean times min(1, c/r).

    Orders for which the candidate has no n-grams are left out of the mean.
    """
    pair = _as_pair(candidate, references)
    c = len(pair.candidate)
    if c == 0:
        return 0.0
    r = closest_reference_length(c, pair.references)
    log_sum, k = 0.0, 0
    for st in bleu_stats(pair, config.max_n):
        if st.candidate_total == 0:
            continue
        if st.clipped_matches == 0:
            return 0.0
        log_sum += math.log(st.clipped_matches / st.candidate_total)
        k += 1
    brevity = min(1.0, c / r) if r > 0 else 1.0
    return brevity * math.exp(log_sum / k)


# --------------------------------------------------------------------- GLEU


def _pooled_ngrams(tokens: Tokens, max_n: int) -> Counter:
    pool: Counter = Counter()
    for n in range(1, max_n + 1):
        pool.update(ngrams(tokens, n))
    return pool


def gleu(candidate, references=None, config: MetricConfig = DEFAULT_CONFIG) -> float:
    """min(precision, recall) over the pooled 1..max_n-grams, best reference."""
    pair = _as_pair(candidate, references)
    if not pair.candidate:
        return 0.0
    cand = _pooled_ngrams(pair.candidate, config.max_n)
    cand_total = sum(cand.values())
    best = 0.0
    for ref_tokens in pair.references:
        ref = _pooled_ngrams(ref_tokens, config.max_n)
        ref_total = sum(ref.values())
        if ref_total == 0:
            continue
        matches = sum((cand & ref).values())
        best = max(best, min(matches / cand_total, matches / ref_total))
    return best


# ------------------------------------------------------------------- METEOR


def count_chunks(alignment: Sequence[tuple[int, int]]) -> int:
    """Number of maximal runs contiguous and in order on both sides."""
    chunks = 0
    prev = None
    for i, j in sorted(alignment):
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def _best_stage_alignment(n_cand, n_ref, eligible, fixed):
    """Add a maximum set of one-to-one matches drawn from ``eligible``.

    Among maximum-size additions the one giving the fewest chunks for the
    combined alignment (``fixed`` plus the additions) is returned.
    Exhaustive memoised search; falls back to greedy on a state-budget overflow.
    """
    fixed_cand = {i: j for i, j in fixed}
    used0 = 0
    for _, j in fixed:
        used0 |= 1 << j
    options = [[j for j in eligible.get(i, ())] for i in range(n_cand)]
    if not any(options):
        return []

    memo: dict = {}

    def solve(i, used, prev_j):
        # Returns (matches, -chunks) for positions i.. and the chosen pairs.
        if i == n_cand:
            return (0, 0), ()
        key = (i, used, prev_j)
        hit = memo.get(key)
        if hit is not None:
            return hit
        if len(memo) > MAX_ALIGNMENT_STATES:
            raise _Budget
        if i in fixed_cand:
            j = fixed_cand[i]
            (m, negc), chosen = solve(i + 1, used, j)
            start = 0 if prev_j is not None and prev_j == j - 1 else 1
            best = ((m, negc - start), chosen)
        else:
            best = solve(i + 1, used, None)
            for j in options[i]:
                if used >> j & 1:
                    continue
                (m, negc), chosen = solve(i + 1, used | (1 << j), j)
                start = 0 if prev_j is not None and prev_j == j - 1 else 1
                cand = ((m + 1, negc - start), ((i, j),) + chosen)
                if cand[0] > best[0]:
                    best = cand
        memo[key] = best
        return best

    try:
        return list(solve(0, used0, None)[1])
    except (_Budget, RecursionError):
        log.info("METEOR alignment search exceeded budget; using greedy alignment")
        return _greedy_stage_alignment(n_cand, options, fixed)


class _Budget(Exception):
    pass


def _greedy_stage_alignment(n_cand, options, fixed):
    used = {j for _, j in fixed}
    by_cand = dict(fixed)
    added = []
    for i in range(n_cand):
        if i in by_cand:
            continue
        free = [j for j in options[i] if j not in used]
        if not free:
            continue
        prev = by_cand.get(i - 1)
        j = prev + 1 if prev is not None and prev + 1 in free else free[0]
        used.add(j)
        by_cand[i] = j
        added.append((i, j))
    return added


def meteor_alignment(candidate: Tokens, reference: Tokens, synonyms=None) -> list[tuple[int, int]]:
    """Exact matches first, then synonym-table matches among leftovers."""
    exact: dict[int, list[int]] = {}
    for i, c in enumerate(candidate):
        js = [j for j, r in enumerate(reference) if r == c]
        if js:
            exact[i] = js
    alignment = _best_stage_alignment(len(candidate), len(reference), exact, [])
    if synonyms:
        used_c = {i for i, _ in alignment}
        used_r = {j for _, j in alignment}
        syn: dict[int, list[int]] = {}
        for i, c in enumerate(candidate):
            if i in used_c:
                continue
            js = [
                j
                for j, r in enumerate(reference)
                if j not in used_r and (r in synonyms.get(c, ()) or c in synonyms.get(r, ()))
            ]
            if js:
                syn[i] = js
        if syn:
            alignment += _best_stage_alignment(len(candidate), len(reference), syn, alignment)
    return sorted(alignment)


def meteor_details(candidate: Tokens, reference: Tokens, config: MetricConfig = DEFAULT_CONFIG) -> MeteorComputation:
    alignment = meteor_alignment(candidate, reference, config.synonyms)
    m = len(alignment)
    if m == 0:
        return MeteorComputation(0, 0.0, 0.0, 0.0, 0, 0.0)
    precision = m / len(candidate)
    recall = m / len(reference)
    f_mean = precision * recall / (config.alpha * precision + (1.0 - config.alpha) * recall)
    chunks = count_chunks(alignment)
    penalty = config.gamma * (chunks / m) ** config.beta_exp
    return MeteorComputation(m, precision, recall, f_mean, chunks, penalty)


def meteor(candidate, references=None, config: MetricConfig = DEFAULT_CONFIG) -> float:
    pair = _as_pair(candidate, references)
    if not pair.candidate:
        return 0.0
    return max(meteor_details(pair.candidate, ref, config).score for ref in pair.references)


# ------------------------------------------------------------------ ROUGE-L


def lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references=None, config: MetricConfig = DEFAULT_CONFIG) -> float:
    pair = _as_pair(candidate, references)
    if not pair.candidate:
        return 0.0
    beta2 = config.rouge_beta**2
    best = 0.0
    for ref in pair.references:
        lcs = lcs_length(pair.candidate, ref)
        if lcs == 0:
            continue
        r, p = lcs / len(ref), lcs / len(pair.candidate)
        best = max(best, (1 + beta2) * r * p / (r + beta2 * p))
    return best


METRICS = {"bleu": bleu, "gleu": gleu, "meteor": meteor, "rouge_l": rouge_l}
METRIC_NAMES = tuple(METRICS)


# ------------------------------------------------------------------ reports


@dataclass(frozen=True)
class SentenceScores:
    image_id: str
    bleu: float
    gleu: float
    meteor: float
    rouge_l: float
    n_references: int = 1

    def values(self) -> tuple[float, float, float, float]:
        return (self.bleu, self.gleu, self.meteor, self.rouge_l)


@dataclass(frozen=True)
class MetricReport:
    sentences: tuple[SentenceScores, ...]

    @property
    def averages(self) -> dict[str, float]:
        n = len(self.sentences)
        return {
            name: math.fsum(getattr(s, name) for s in self.sentences) / n
            for name in METRIC_NAMES
        }

    @property
    def reference_counts(self) -> dict[int, int]:
        return dict(sorted(Counter(s.n_references for s in self.sentences).items()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("image_id",) + METRIC_NAMES)
        for s in self.sentences:
            w.writerow((s.image_id,) + tuple(_fmt(v) for v in s.values()))
        avg = self.averages
        w.writerow(("AVERAGE",) + tuple(_fmt(avg[k]) for k in METRIC_NAMES))
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "sentences": [
                {"image_id": s.image_id, **dict(zip(METRIC_NAMES, s.values())), "n_references": s.n_references}
                for s in self.sentences
            ],
            "average": self.averages,
            "reference_counts": {str(k): v for k, v in self.reference_counts.items()},
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        text = self.to_json() if path.suffix == ".json" else self.to_csv()
        path.write_text(text, encoding="utf-8", newline="\n")


def _fmt(x: float) -> str:
    return repr(float(x))


def score_sentence(image_id: str, pair: SentencePair, config: MetricConfig = DEFAULT_CONFIG) -> SentenceScores:
    return SentenceScores(
        image_id,
        bleu(pair, config=config),
        gleu(pair, config=config),
        meteor(pair, config=config),
        rouge_l(pair, config=config),
        len(pair.references),
    )


def score_corpus(
    pairs: Sequence[tuple[str, SentencePair]],
    config: MetricConfig = DEFAULT_CONFIG,
    workers: int = 1,
) -> MetricReport:
    """Score each (image_id, pair) and aggregate by arithmetic mean."""
    if not pairs:
        raise EmptyCorpus("cannot score an empty corpus")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda p: score_sentence(p[0], p[1], config), pairs))
    else:
        rows = [score_sentence(i, p, config) for i, p in pairs]
    return MetricReport(tuple(rows))


def load_pairs_tsv(path) -> list[tuple[str, SentencePair]]:
    """Read ``image_id<TAB>candidate<TAB>reference[<TAB>reference...]`` lines."""
    from .textcorpus import EmptyFile, MalformedLine, tokenize

    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().replace("\r\n", "\n").split("\n")
    pairs = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 3 or not parts[0]:
            raise MalformedLine(path, lineno, "expected image_id<TAB>candidate<TAB>reference...")
        pairs.append((parts[0], SentencePair(tokenize(parts[1]), [tokenize(r) for r in parts[2:]])))
    if not pairs:
        raise EmptyFile(path)
    return pairs


def comparison_table(reports: Mapping[str, MetricReport]) -> str:
    """Per-model corpus averages as CSV: ``model,bleu,gleu,meteor,rouge_l``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model",) + METRIC_NAMES)
    for name, rep in reports.items():
        avg = rep.averages
        w.writerow((name,) + tuple(f"{avg[k]:.4f}" for k in METRIC_NAMES))
    return buf.getvalue()
