"""Knowledge-distilling decoder: causal self-attention, adaptive distilling
attention over the explored knowledge, output projection, loss, decoding and
gate statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionBlock, FeedForward, MultiHeadAttention, causal_mask
from .errors import ShapeError
from .nn import Module, init_matrix, zeros
from .tensor import Tensor, no_grad

PAD, BOS, EOS, UNK = 0, 1, 2, 3
NORMALITY_WORDS = frozenset({"no", "normal", "clear", "stable"})


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    out = np.zeros((length, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : d // 2])
    return out


def _insert_axis(x: Tensor, at: int) -> Tensor:
    shape = list(x.shape)
    shape.insert(at if at >= 0 else len(shape) + 1 + at, 1)
    return x.reshape(tuple(shape))


class AdaptiveDistillingAttention(Module):
    """MHA(h, I' + l1*G' + l2*W') with per-position gates l1, l2 in (0, 1).

    Gates are ``sigmoid(h W_h (+) (I' W_I + G' W_G + W' W_W))``: the step's
    1x2 row is added to each of the N_I rows of the source term, giving one
    (l1, l2) pair per source position and per decoding step.
    """

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, dtype=np.float32, dropout: float = 0.1):
        # zero init: every gate starts at exactly 0.5
        self.W_h = zeros((d, 2), dtype)
        self.W_I = zeros((d, 2), dtype)
        self.W_G = zeros((d, 2), dtype)
        self.W_W = zeros((d, 2), dtype)
        self.mha = MultiHeadAttention(d, n_heads, rng, dtype, dropout)

    def gates(self, h: Tensor, i_prime: Tensor, g_prime: Tensor, w_prime: Tensor) -> Tensor:
        """Returns (..., l, N_I, 2)."""
        step = _insert_axis(h @ self.W_h, -2)                     # (..., l, 1, 2)
        src = i_prime @ self.W_I + g_prime @ self.W_G + w_prime @ self.W_W
        src = _insert_axis(src, -3)                               # (..., 1, N_I, 2)
        lam = T.sigmoid(step + src)
        # a saturated sigmoid rounds to exactly 0 or 1; keep gates strictly inside
        one = np.array(1, dtype=lam.dtype)
        return T.clip(lam, np.finfo(lam.dtype).tiny, np.nextafter(one, 0))

    def forward(self, h: Tensor, i_prime: Tensor, g_prime: Tensor, w_prime: Tensor,
                gates: np.ndarray | Tensor | None = None) -> tuple[Tensor, Tensor]:
        n_i = i_prime.shape[-2]
        if g_prime.shape[-2] != n_i or w_prime.shape[-2] != n_i:
            raise ShapeError(
                f"ADA sources need equal row counts: I' {i_prime.shape}, G' {g_prime.shape}, W' {w_prime.shape}"
            )
        lam = self.gates(h, i_prime, g_prime, w_prime) if gates is None else T.as_tensor(gates, h.dtype)
        lam1, lam2 = lam[..., 0:1], lam[..., 1:2]
        fused = (_insert_axis(i_prime, -3) + lam1 * _insert_axis(g_prime, -3)
                 + lam2 * _insert_axis(w_prime, -3))               # (..., l, N_I, d)
        query = _insert_axis(h, -2)                               # (..., l, 1, d)
        out, _ = self.mha.forward(query, fused)
        return out.reshape(h.shape), lam

    def __call__(self, h, i_prime, g_prime, w_prime, gates=None):
        return self.forward(h, i_prime, g_prime, w_prime, gates)


def adaptive_distilling_attention(h, i_prime, g_prime, w_prime, params: AdaptiveDistillingAttention, gates=None):
    return params.forward(h, i_prime, g_prime, w_prime, gates)


@dataclass
class DecoderOutput:
    logits: Tensor          # (..., L, V)
    gates: Tensor           # (..., L, N_I, 2)


class Decoder(Module):
    def __init__(self, vocab_size: int, d: int, n_heads: int, rng: np.random.Generator, dtype=np.float32,
                 dropout: float = 0.1, depth: int = 3):
        self.d = d
        self.vocab_size = vocab_size
        self.word_emb = Tensor(rng.normal(0.0, d ** -0.5, size=(vocab_size, d)).astype(dtype), requires_grad=True)
        self.self_blocks = [AttentionBlock(d, n_heads, rng, dtype, dropout) for _ in range(depth)]
        self.ada = AdaptiveDistillingAttention(d, n_heads, rng, dtype, dropout)
        self.ffn = FeedForward(d, rng, dtype, dropout)
        self.W_p = init_matrix(rng, d, vocab_size, dtype)
        self.b_p = zeros(vocab_size, dtype)

    def embed(self, token_ids: np.ndarray) -> Tensor:
        token_ids = np.asarray(token_ids)
        w = T.embedding(self.word_emb, token_ids)
        e = sinusoidal_positions(token_ids.shape[-1], self.d).astype(self.word_emb.dtype)
        return w + Tensor(e)

    def forward(self, token_ids: np.ndarray, i_prime: Tensor, g_prime: Tensor, w_prime: Tensor,
                gates=None) -> DecoderOutput:
        token_ids = np.asarray(token_ids)
        x = self.embed(token_ids)
        allow = causal_mask(token_ids.shape[-1])
        h = x
        for block in self.self_blocks:
            h = block(h, h, allow)
        h, lam = self.ada.forward(h, i_prime, g_prime, w_prime, gates)
        logits = self.ffn(h) @ self.W_p + self.b_p
        return DecoderOutput(logits, lam)

    def distributions(self, token_ids, i_prime, g_prime, w_prime) -> np.ndarray:
        out = self.forward(token_ids, i_prime, g_prime, w_prime)
        return T.softmax(out.logits, axis=-1).data


def decode_forward(token_ids, i_prime, g_prime, w_prime, decoder: Decoder) -> np.ndarray:
    """Per-step next-token distributions under teacher forcing."""
    return decoder.distributions(token_ids, i_prime, g_prime, w_prime)


def cross_entropy_loss(logits: Tensor, gold_ids: np.ndarray, pad_id: int = PAD) -> Tensor:
    """Mean negative log-likelihood over non-PAD positions."""
    gold_ids = np.asarray(gold_ids)
    if logits.shape[:-1] != gold_ids.shape:
        raise ShapeError(f"logits {logits.shape} do not line up with gold ids {gold_ids.shape}")
    mask = (gold_ids != pad_id).astype(logits.dtype)
    count = mask.sum()
    if count == 0:
        raise ShapeError("cross entropy over an all-PAD batch")
    return T.nll_from_logits(logits, gold_ids, mask / count)


def teacher_forcing_arrays(sequences: Sequence[Sequence[int]], max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """[BOS]+seq inputs and seq+[EOS] targets, right-padded with PAD."""
    if max_len is not None:
        sequences = [list(s)[:max_len] for s in sequences]
    L = max(len(s) for s in sequences) + 1
    inp = np.full((len(sequences), L), PAD, dtype=np.int64)
    tgt = np.full((len(sequences), L), PAD, dtype=np.int64)
    for r, s in enumerate(sequences):
        inp[r, 0] = BOS
        inp[r, 1:len(s) + 1] = s
        tgt[r, :len(s)] = s
        tgt[r, len(s)] = EOS
    return inp, tgt


# -- decoding ----------------------------------------------------------------
@dataclass
class GenerationResult:
    token_ids: list[int]
    text: str
    gates: list[np.ndarray] = field(default_factory=list)       # per token, (N_I, 2)
    step_log_probs: list[float] = field(default_factory=list)   # per token
    log_prob: float = 0.0                                        # includes EOS when emitted
    finished: bool = False

    @property
    def scored_length(self) -> int:
        return len(self.token_ids) + (1 if self.finished else 0)

    @property
    def normalized_score(self) -> float:
        return self.log_prob / max(self.scored_length, 1)

    def gate_means(self) -> list[list[float]]:
        return [[float(g[:, 0].mean()), float(g[:, 1].mean())] for g in self.gates]


def _step_log_probs(logits: np.ndarray) -> np.ndarray:
    # PAD and BOS are never generated; the rest is renormalised
    z = np.array(logits, dtype=np.float64)
    z[..., PAD] = -np.inf
    z[..., BOS] = -np.inf
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _index_rows(x: Tensor, rows) -> Tensor:
    return Tensor(x.data[rows])


def greedy_decode(decoder: Decoder, i_prime: Tensor, g_prime: Tensor, w_prime: Tensor,
                  max_len: int, detok=None) -> list[GenerationResult]:
    """Argmax decoding for a batch of encoded examples (leading axis = batch)."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    B = i_prime.shape[0]
    seqs = np.full((B, 1), BOS, dtype=np.int64)
    results = [GenerationResult([], "") for _ in range(B)]
    active = np.arange(B)
    with no_grad():
        for _ in range(max_len):
            out = decoder.forward(seqs[active], _index_rows(i_prime, active),
                                  _index_rows(g_prime, active), _index_rows(w_prime, active))
            lp = _step_log_probs(out.logits.data[:, -1])
            nxt = lp.argmax(axis=-1)
            step = np.full(B, PAD, dtype=np.int64)
            keep = []
            for j, b in enumerate(active):
                tok = int(nxt[j])
                res = results[b]
                res.log_prob += float(lp[j, tok])
                step[b] = tok
                if tok == EOS:
                    res.finished = True
                    continue
                res.token_ids.append(tok)
                res.step_log_probs.append(float(lp[j, tok]))
                res.gates.append(out.gates.data[j, -1].copy())
                keep.append(b)
            seqs = np.concatenate([seqs, step[:, None]], axis=1)
            active = np.array(keep, dtype=np.int64)
            if not len(active):
                break
    if detok is not None:
        for r in results:
            r.text = detok(r.token_ids)
    return results


def beam_decode(decoder: Decoder, i_prime: Tensor, g_prime: Tensor, w_prime: Tensor,
                max_len: int, beam_width: int, detok=None) -> GenerationResult:
    """Beam search for one example (inputs without a batch axis or with batch 1).

    Candidates are ranked by summed log-probability over length (EOS counts
    as a scored step); ties prefer the lexicographically smaller token
    sequence. Hypotheses still open at ``max_len`` are kept as unfinished
    candidates.
    """
    if max_len < 1 or beam_width < 1:
        raise ValueError("max_len and beam_width must be >= 1")
    srcs = [x if x.ndim == 3 else x.reshape((1,) + x.shape) for x in (i_prime, g_prime, w_prime)]
    live: list[GenerationResult] = [GenerationResult([], "")]
    done: list[GenerationResult] = []

    def rank(r: GenerationResult):
        return (-r.normalized_score, tuple(r.token_ids) + ((EOS,) if r.finished else ()))

    with no_grad():
        for _ in range(max_len):
            if not live:
                break
            seqs = np.array([[BOS] + h.token_ids for h in live], dtype=np.int64)
            out = decoder.forward(seqs, *srcs)
            lp = _step_log_probs(out.logits.data[:, -1])
            cands: list[GenerationResult] = []
            for j, h in enumerate(live):
                for tok in np.flatnonzero(np.isfinite(lp[j])):
                    tok = int(tok)
                    c = GenerationResult(list(h.token_ids), "", list(h.gates), list(h.step_log_probs),
                                         h.log_prob + float(lp[j, tok]))
                    if tok == EOS:
                        c.finished = True
                    else:
                        c.token_ids.append(tok)
                        c.step_log_probs.append(float(lp[j, tok]))
                        c.gates.append(out.gates.data[j, -1].copy())
                    cands.append(c)
            cands.sort(key=rank)
            live = []
            for c in cands[:beam_width]:
                (done if c.finished else live).append(c)
    done.extend(live)
    best = min(done, key=rank)
    if detok is not None:
        best.text = detok(best.token_ids)
    return best


# -- gate analysis -----------------------------------------------------------
def split_sentences(tokens: Sequence[str]) -> list[list[int]]:
    """Token positions grouped into sentences; the period closes a sentence."""
    sents, cur = [], []
    for i, tok in enumerate(tokens):
        cur.append(i)
        if tok == ".":
            sents.append(cur)
            cur = []
    if cur:
        sents.append(cur)
    return sents


def sentence_class(words: Iterable[str]) -> str:
    return "normality" if NORMALITY_WORDS.intersection(words) else "abnormality"


def gate_statistics(items: Iterable[tuple[Sequence[str], np.ndarray]]) -> dict[str, dict]:
    """Mean l1/l2 per sentence class.

    ``items`` yields (tokens, gates) where gates is (len(tokens), N_I, 2) or
    already position-averaged (len(tokens), 2). Each token's gate pair joins
    the class of the sentence containing it.
    """
    acc: dict[str, dict] = {}
    for tokens, gates in items:
        gates = np.asarray(gates, dtype=np.float64)
        if len(tokens) == 0:
            continue
        if gates.shape[0] != len(tokens):
            raise ShapeError(f"{len(tokens)} tokens but {gates.shape[0]} gate rows")
        for sent in split_sentences(tokens):
            cls = sentence_class(tokens[i] for i in sent)
            a = acc.setdefault(cls, {"sum": np.zeros(2), "n": 0, "pos_sum": None, "sentences": 0})
            a["sentences"] += 1
            for i in sent:
                g = gates[i]
                a["n"] += 1
                if g.ndim == 2:
                    a["sum"] += g.mean(axis=0)
                    a["pos_sum"] = g.copy() if a["pos_sum"] is None else a["pos_sum"] + g
                else:
                    a["sum"] += g
    table = {}
    for cls in ("normality", "abnormality"):
        if cls not in acc:
            continue
        a = acc[cls]
        row = {"lambda1": float(a["sum"][0] / a["n"]), "lambda2": float(a["sum"][1] / a["n"]),
               "tokens": a["n"], "sentences": a["sentences"]}
        if a["pos_sum"] is not None:
            row["lambda1_by_position"] = (a["pos_sum"][:, 0] / a["n"]).tolist()
            row["lambda2_by_position"] = (a["pos_sum"][:, 1] / a["n"]).tolist()
        table[cls] = row
    return table


def format_gate_table(table: dict[str, dict]) -> str:
    lines = [f"{'class':<12} {'lambda1 (G)':>12} {'lambda2 (W)':>12} {'tokens':>8} {'sentences':>10}"]
    for cls, row in table.items():
        lines.append(f"{cls:<12} {row['lambda1']:>12.4f} {row['lambda2']:>12.4f} "
                     f"{row['tokens']:>8d} {row['sentences']:>10d}")
    return "\n".join(lines)
