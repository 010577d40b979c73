"""Corpus-level caption metrics over multi-reference sets: BLEU-4, ROUGE-L
and CIDEr (the original TF-IDF form, not CIDEr-D)."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import ValidationError
from .feature_store import tokenize

Tokens = Sequence[str]

# Floor applied to a zero modified precision so the geometric mean stays defined.
BLEU_EPSILON = 1e-9
ROUGE_BETA = 1.2
CIDER_SCALE = 10.0


@dataclass
class ScoredCorpus:
    hypotheses: list[list[str]]
    references: list[list[list[str]]]
    video_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.hypotheses) != len(self.references):
            raise ValidationError("hypotheses and reference sets differ in number")
        if not self.hypotheses:
            raise ValidationError("empty corpus")
        if any(len(refs) == 0 for refs in self.references):
            raise ValidationError("every video needs at least one reference")
        if not self.video_ids:
            self.video_ids = [str(i) for i in range(len(self.hypotheses))]

    @classmethod
    def from_text(cls, hypotheses: Sequence[str], references: Sequence[Sequence[str]],
                  video_ids: Sequence[str] | None = None) -> "ScoredCorpus":
        return cls([tokenize(h) for h in hypotheses],
                   [[tokenize(r) for r in refs] for refs in references],
                   list(video_ids or []))


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU-4
# ---------------------------------------------------------------------------


def _closest_ref_len(hyp_len: int, refs: list[Tokens]) -> int:
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def bleu4(corpus: ScoredCorpus, max_n: int = 4) -> float:
    """Corpus BLEU: clipped n-gram counts pooled over the corpus, geometric
    mean of precisions 1..4, brevity penalty against the closest reference
    length per video. A zero precision is floored at BLEU_EPSILON."""
    matched = [0] * max_n
    possible = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in zip(corpus.hypotheses, corpus.references):
        hyp_len += len(hyp)
        ref_len += _closest_ref_len(len(hyp), refs)
        for n in range(1, max_n + 1):
            h = ngrams(hyp, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in h.items())
            possible[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for m, p in zip(matched, possible):
        prec = m / p if m > 0 else BLEU_EPSILON
        log_p += math.log(prec) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_single(hyp: Tokens, refs: list[Tokens], beta: float = ROUGE_BETA) -> float:
    best = 0.0
    for r in refs:
        lcs = lcs_length(hyp, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(hyp), lcs / len(r)
        best = max(best, (1 + beta**2) * p * rec / (rec + beta**2 * p))
    return best


def rouge_l(corpus: ScoredCorpus) -> float:
    return sum(rouge_l_per_video(corpus)) / len(corpus.hypotheses)


def rouge_l_per_video(corpus: ScoredCorpus) -> list[float]:
    return [rouge_l_single(h, refs) for h, refs in zip(corpus.hypotheses, corpus.references)]


# ---------------------------------------------------------------------------
# CIDEr
# ---------------------------------------------------------------------------


def _tfidf(counts: Counter, df: Counter, num_videos: int) -> dict:
    total = sum(counts.values())
    if total == 0:
        return {}
    return {g: (c / total) * math.log(num_videos / max(1, df[g])) for g, c in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider_per_video(corpus: ScoredCorpus, max_n: int = 4) -> list[float]:
    """Per-video CIDEr: for each order n, mean over references of the cosine
    between TF-IDF n-gram vectors, averaged over orders and scaled by 10.
    Document frequency counts the videos whose reference set contains an n-gram."""
    num_videos = len(corpus.hypotheses)
    if num_videos < 2:
        raise ValidationError("CIDEr needs at least 2 videos for document frequencies")
    scores = [0.0] * num_videos
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for refs in corpus.references:
            df.update(set().union(*(ngrams(r, n).keys() for r in refs)))
        for v, (hyp, refs) in enumerate(zip(corpus.hypotheses, corpus.references)):
            h_vec = _tfidf(ngrams(hyp, n), df, num_videos)
            sims = [_cosine(h_vec, _tfidf(ngrams(r, n), df, num_videos)) for r in refs]
            scores[v] += sum(sims) / len(sims) / max_n
    return [CIDER_SCALE * s for s in scores]


def cider(corpus: ScoredCorpus) -> float:
    per = cider_per_video(corpus)
    return sum(per) / len(per)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def score_corpus(corpus: ScoredCorpus) -> dict:
    per_rouge = rouge_l_per_video(corpus)
    per_cider = cider_per_video(corpus) if len(corpus.hypotheses) >= 2 else [float("nan")] * len(per_rouge)
    per_bleu = [bleu4(ScoredCorpus([h], [r])) for h, r in zip(corpus.hypotheses, corpus.references)]
    return {
        "bleu4": bleu4(corpus),
        "rouge_l": sum(per_rouge) / len(per_rouge),
        "cider": sum(per_cider) / len(per_cider),
        "per_video": [
            {"video_id": vid, "bleu4": b, "rouge_l": r, "cider": c}
            for vid, b, r, c in zip(corpus.video_ids, per_bleu, per_rouge, per_cider)
        ],
    }


def write_report(report: dict, path: str | Path, per_video_path: str | Path | None = None) -> None:
    summary = {k: report[k] for k in ("bleu4", "rouge_l", "cider")}
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if per_video_path is not None:
        lines = ["video_id\tbleu4\trouge_l\tcider"]
        lines += [f"{r['video_id']}\t{r['bleu4']:.6f}\t{r['rouge_l']:.6f}\t{r['cider']:.6f}"
                  for r in report["per_video"]]
        Path(per_video_path).write_text("\n".join(lines) + "\n")
