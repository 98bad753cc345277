"""Caption metrics compatible with the COCO caption evaluation toolkit
(BLEU-1..4 corpus level, ROUGE-L with beta 1.2, CIDEr-D with sigma 6) and a
rank-based ROC-AUC.

Candidates and references are token lists or whitespace-tokenised strings.
A reference entry may be a single sequence or a list of alternative
references; a list of strings counts as several references when its strings
contain whitespace, otherwise as one token list.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from typing import Sequence

import numpy as np

from .errors import DataError


def _toks(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def _ref_list(r) -> list[list[str]]:
    if isinstance(r, str):
        return [r.split()]
    r = list(r)
    if r and (not isinstance(r[0], str) or any(" " in x for x in r)):
        # a list of token lists, or of whitespace-separated reference strings
        return [_toks(x) for x in r]
    return [r]


def _check(cands, refs):
    if len(cands) != len(refs):
        raise DataError(f"{len(cands)} candidates but {len(refs)} references")


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_order: int = 4) -> list[float]:
    """Corpus BLEU-1..max_order: clipped precisions, geometric mean, brevity penalty.

    The reference length for each pair is the closest reference length
    (shorter wins a tie).
    """
    _check(candidates, references)
    correct = [0] * max_order
    guess = [0] * max_order
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        cand = _toks(cand)
        refs = _ref_list(refs)
        c_len += len(cand)
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_order + 1):
            cc = ngrams(cand, n)
            maxref: Counter = Counter()
            for r in refs:
                maxref |= ngrams(r, n)
            correct[n - 1] += sum(min(c, maxref[g]) for g, c in cc.items())
            guess[n - 1] += max(0, len(cand) - n + 1)
    bp = 1.0 if c_len >= r_len or c_len == 0 else math.exp(1.0 - r_len / c_len)
    scores = []
    prod = 1.0
    for n in range(max_order):
        if correct[n] == 0 or guess[n] == 0:
            scores.extend([0.0] * (max_order - n))
            break
        # running product then root, the same arithmetic as the toolkit
        prod *= correct[n] / guess[n]
        scores.append(bp * prod ** (1.0 / (n + 1)))
    return scores


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_pair(cand, refs, beta: float = 1.2) -> float:
    cand = _toks(cand)
    refs = _ref_list(refs)
    if not cand:
        return 0.0
    precs, recs = [], []
    for r in refs:
        lcs = lcs_length(r, cand)
        precs.append(lcs / len(cand))
        recs.append(lcs / len(r) if r else 0.0)
    p, r = max(precs), max(recs)
    if p == 0 or r == 0:
        return 0.0
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l(candidates, references, beta: float = 1.2) -> float:
    _check(candidates, references)
    if not candidates:
        return 0.0
    return float(np.mean([rouge_l_pair(c, r, beta) for c, r in zip(candidates, references)]))


def _all_ngrams(tokens, n):
    counts: Counter = Counter()
    for k in range(1, n + 1):
        counts.update(ngrams(tokens, k))
    return counts


def cider_scores(candidates, references, n: int = 4, sigma: float = 6.0) -> np.ndarray:
    """Per-example CIDEr-D (toolkit flavour): idf from the references,
    clipped tf-idf cosine per order, Gaussian length penalty, mean over
    orders and references, times 10."""
    _check(candidates, references)
    cands = [_all_ngrams(_toks(c), n) for c in candidates]
    refs = [[_all_ngrams(r, n) for r in _ref_list(rs)] for rs in references]
    df: Counter = Counter()
    for rs in refs:
        df.update(set(g for r in rs for g in r))
    log_n = math.log(float(len(refs))) if refs else 0.0

    def vec(counts):
        v = [defaultdict(float) for _ in range(n)]
        norm = [0.0] * n
        length = 0
        for g, tf in counts.items():
            k = len(g) - 1
            w = float(tf) * (log_n - math.log(max(1.0, df[g])))
            v[k][g] = w
            norm[k] += w * w
            if k == 1:
                # the toolkit measures length as the bigram count
                length += tf
        return v, [math.sqrt(x) for x in norm], length

    out = []
    for c, rs in zip(cands, refs):
        vc, nc, lc = vec(c)
        total = np.zeros(n)
        for r in rs:
            vr, nr, lr = vec(r)
            penalty = math.exp(-((lc - lr) ** 2) / (2 * sigma**2))
            for k in range(n):
                val = sum(min(w, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, w in vc[k].items())
                if nc[k] != 0 and nr[k] != 0:
                    val /= nc[k] * nr[k]
                total[k] += val * penalty
        out.append(10.0 * total.mean() / len(rs))
    return np.array(out)


def cider(candidates, references, n: int = 4, sigma: float = 6.0) -> float:
    if not candidates:
        return 0.0
    return float(cider_scores(candidates, references, n, sigma).mean())


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks, so ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC undefined: labels contain a single class")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate_all(candidates, references) -> dict[str, float]:
    b = bleu(candidates, references)
    return {"bleu1": b[0], "bleu2": b[1], "bleu3": b[2], "bleu4": b[3],
            "rouge_l": rouge_l(candidates, references), "cider": cider(candidates, references)}


def format_table(scores: dict[str, float]) -> str:
    rows = [("BLEU-1", "bleu1"), ("BLEU-2", "bleu2"), ("BLEU-3", "bleu3"), ("BLEU-4", "bleu4"),
            ("ROUGE-L", "rouge_l"), ("CIDEr", "cider")]
    lines = [f"{label:<8} {scores[key]:.4f}" for label, key in rows]
    lines.insert(4, "METEOR: not implemented")
    for topic, auc in sorted(scores.get("auc_per_topic", {}).items()):
        lines.append(f"AUC {topic:<16} {auc:.4f}")
    return "\n".join(lines)
