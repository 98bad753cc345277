"""Example assembly, topic pretraining, report training and evaluation loops."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics
from . import tensor as T
from .data import CorpusRecord, ReportEmbedder, Vocabulary, detokenize, tokenize
from .errors import DataError
from .mkd import GenerationResult, beam_decode, greedy_decode, teacher_forcing_arrays
from .model import PpkedModel
from .optim import Adam, AdamState
from .poke import positive_class_weights
from .prke import RetrievalIndex, build_index
from .tensor import no_grad

log = logging.getLogger(__name__)


@dataclass
class Example:
    id: str
    features: np.ndarray        # (N_I, feature_dim)
    prior: np.ndarray           # (N_K, d) retrieved report embeddings
    tokens: list[str]
    token_ids: list[int]
    labels: np.ndarray          # (N_T,)


def index_records(records: Sequence[CorpusRecord], embedder: ReportEmbedder):
    return [(r.id, r.image_embedding, embedder(r.tokens)) for r in records]


def build_training_index(train_records: Sequence[CorpusRecord], embedder: ReportEmbedder, k: int) -> RetrievalIndex:
    # +1: a training query never retrieves its own report
    return build_index(index_records(train_records, embedder), k + 1)


def make_examples(records: Sequence[CorpusRecord], index: RetrievalIndex, vocab: Vocabulary, k: int,
                  held_out: bool, max_len: int | None = None) -> list[Example]:
    """Attach retrieved prior reports to each record.

    Held-out records must not be in the index at all; training records skip
    their own entry.
    """
    if held_out:
        index.assert_disjoint(r.id for r in records)
    out = []
    for r in records:
        prior = index.prior_reports(r.image_embedding, k, exclude=() if held_out else (r.id,))
        toks = r.tokens
        if max_len is not None:
            toks = toks[:max_len]
        out.append(Example(r.id, r.patch_features, prior, toks, vocab.encode(toks), r.topic_labels))
    return out


def batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def stack_batch(examples: Sequence[Example], idx) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    sel = [examples[i] for i in idx]
    feats = np.stack([e.features for e in sel])
    prior = np.stack([e.prior for e in sel])
    inp, tgt = teacher_forcing_arrays([e.token_ids for e in sel])
    return feats, prior, inp, tgt


def epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


# -- stage 1: topic pretraining ---------------------------------------------
def pretrain_topics(model: PpkedModel, examples: Sequence[Example], epochs: int, lr: float,
                    batch_size: int, seed: int, on_epoch: Callable | None = None) -> list[float]:
    """Weighted multi-label BCE on mean-pooled I'; trains the image side and the tag head."""
    labels = np.stack([e.labels for e in examples])
    pos_w = positive_class_weights(labels)
    params = [p for n, p in model.named_parameters()
              if n.startswith(("W_in", "b_in", "topic_embedding", "poke.", "tag_head."))]
    opt = Adam(params, lr=lr)
    losses = []
    for epoch in range(epochs):
        model.train()
        model.set_rng(epoch_rng(seed, epoch, 1))
        total, count = 0.0, 0
        for idx in batches(len(examples), batch_size, epoch_rng(seed, epoch, 0)):
            feats = np.stack([examples[i].features for i in idx])
            loss = T.bce_with_logits(model.tag_logits(feats), labels[idx], pos_w)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)
        if on_epoch:
            on_epoch(epoch, losses[-1])
    model.eval()
    return losses


def topic_scores(model: PpkedModel, examples: Sequence[Example], batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for idx in batches(len(examples), batch_size, None):
            feats = np.stack([examples[i].features for i in idx])
            out.append(T.sigmoid(model.tag_logits(feats)).data)
    return np.concatenate(out)


def topic_aucs(model: PpkedModel, examples: Sequence[Example], topics: Sequence[str] | None = None) -> dict[str, float]:
    scores = topic_scores(model, examples)
    labels = np.stack([e.labels for e in examples])
    res = {}
    for j, name in enumerate(model.topics):
        if topics is not None and name not in topics:
            continue
        if 0 < labels[:, j].sum() < len(labels):
            res[name] = metrics.roc_auc(scores[:, j], labels[:, j])
    return res


# -- stage 2: report generation ---------------------------------------------
def train_epoch(model: PpkedModel, examples: Sequence[Example], opt: Adam, batch_size: int,
                seed: int, epoch: int) -> float:
    model.train()
    model.set_rng(epoch_rng(seed, epoch, 1))
    total, tokens = 0.0, 0
    for idx in batches(len(examples), batch_size, epoch_rng(seed, epoch, 0)):
        feats, prior, inp, tgt = stack_batch(examples, idx)
        loss = model.loss(feats, prior, inp, tgt)
        opt.zero_grad()
        loss.backward()
        opt.step()
        n = int((tgt != 0).sum())
        total += loss.item() * n
        tokens += n
    model.eval()
    return total / tokens


def teacher_forced_loss(model: PpkedModel, examples: Sequence[Example], batch_size: int = 32) -> float:
    model.eval()
    total, tokens = 0.0, 0
    with no_grad():
        for idx in batches(len(examples), batch_size, None):
            feats, prior, inp, tgt = stack_batch(examples, idx)
            n = int((tgt != 0).sum())
            total += model.loss(feats, prior, inp, tgt).item() * n
            tokens += n
    return total / tokens


def generate(model: PpkedModel, examples: Sequence[Example], max_len: int | None = None,
             beam_width: int = 1, batch_size: int = 32) -> list[GenerationResult]:
    model.eval()
    max_len = max_len or model.cfg.max_len
    detok = lambda ids: detokenize(model.vocab.decode(ids))  # noqa: E731
    results: list[GenerationResult] = []
    with no_grad():
        for idx in batches(len(examples), batch_size, None):
            feats = np.stack([examples[i].features for i in idx])
            prior = np.stack([examples[i].prior for i in idx])
            enc = model.encode(feats, prior)
            if beam_width == 1:
                results.extend(greedy_decode(model.decoder, enc.i_prime, enc.g_prime, enc.w_prime, max_len, detok))
            else:
                for j in range(len(idx)):
                    srcs = [T.Tensor(x.data[j:j + 1]) for x in (enc.i_prime, enc.g_prime, enc.w_prime)]
                    results.append(beam_decode(model.decoder, *srcs, max_len, beam_width, detok))
    return results


def teacher_forced_gates(model: PpkedModel, examples: Sequence[Example], batch_size: int = 32):
    """(tokens, gates) pairs from gold-prefix passes; gates[i] produced token i."""
    model.eval()
    out = []
    with no_grad():
        for idx in batches(len(examples), batch_size, None):
            feats, prior, inp, _ = stack_batch(examples, idx)
            dec = model.forward(feats, prior, inp)
            for j, i in enumerate(idx):
                n = len(examples[i].tokens)
                out.append((examples[i].tokens, dec.gates.data[j, :n]))
    return out


def score_generations(results: Sequence[GenerationResult], examples: Sequence[Example]) -> dict[str, float]:
    cands = [tokenize(r.text) for r in results]
    refs = [e.tokens for e in examples]
    return metrics.evaluate_all(cands, refs)


def fit(model: PpkedModel, train_examples: Sequence[Example], epochs: int, lr: float, batch_size: int,
        seed: int, opt: Adam | None = None, start_epoch: int = 0,
        on_epoch: Callable[[int, float, Adam], bool | None] | None = None) -> list[float]:
    """Cross-entropy training; ``on_epoch`` may return True to stop early."""
    if opt is None:
        opt = Adam(model.parameters(include_head=False), lr=lr)
    losses = []
    for epoch in range(start_epoch, start_epoch + epochs):
        losses.append(train_epoch(model, train_examples, opt, batch_size, seed, epoch))
        if on_epoch and on_epoch(epoch, losses[-1], opt):
            break
    return losses


class RunLog:
    """JSON-lines training log."""

    def __init__(self, path: Path | None):
        self.path = path
        self.t0 = time.time()

    def write(self, **row) -> None:
        row.setdefault("wall_time", round(time.time() - self.t0, 3))
        log.info("%s", row)
        if self.path is None:
            return
        with open(self.path, "a") as fh:
            fh.write(json.dumps(row) + "\n")


def adam_from_state(model: PpkedModel, state: AdamState | None, lr: float) -> Adam:
    opt = Adam(model.parameters(include_head=False), lr=lr)
    if state is not None:
        if len(state.first_moment) != len(opt.params):
            raise DataError("optimizer state in checkpoint does not match the model parameters")
        opt.state = state
        opt.state.learning_rate = lr
    return opt
