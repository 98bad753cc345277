"""The full model: feature projection, posterior and prior explorers, and the
distilling decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import Vocabulary, topic_words
from .mkd import Decoder, DecoderOutput, cross_entropy_loss
from .nn import Module, init_matrix, zeros
from .poke import TOPICS, PosteriorExplorer, PosteriorOutput, TopicBag, TopicHead
from .prke import GraphEncoder, KnowledgeGraph, PriorExplorer, PriorOutput
from .tensor import Tensor


@dataclass
class Encoded:
    posterior: PosteriorOutput
    nodes: Tensor                 # G_Pr, (B, N_T, d)
    prior: PriorOutput

    @property
    def i_prime(self) -> Tensor:
        return self.posterior.I_prime

    @property
    def g_prime(self) -> Tensor:
        return self.prior.G_prime

    @property
    def w_prime(self) -> Tensor:
        return self.prior.W_prime


class PpkedModel(Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, graph: KnowledgeGraph | None = None,
                 topics=TOPICS, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        self.topics = tuple(topics)
        self.graph_def = graph if graph is not None else KnowledgeGraph.default(self.topics)
        dtype = np.dtype(cfg.dtype)
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        d, n = cfg.d, cfg.n_heads

        if cfg.feature_kind == "raw":
            self.W_in = init_matrix(rng, cfg.feature_dim, d, dtype)
            self.b_in = zeros(d, dtype)
        self.decoder = Decoder(len(vocab), d, n, rng, dtype, cfg.dropout, cfg.decoder_depth)
        topic_init = self._topic_init(rng)
        self.topic_embedding = Tensor(topic_init.astype(dtype), requires_grad=True)
        self.poke = PosteriorExplorer(d, n, rng, dtype, cfg.dropout, cfg.poke_depth)
        self.tag_head = TopicHead(d, len(self.topics), rng, dtype)
        self.graph = GraphEncoder(self.graph_def, d, rng, dtype, cfg.gcn_layers, node_init=topic_init)
        self.prke = PriorExplorer(d, n, rng, dtype, cfg.dropout, cfg.prke_depth)
        self.set_rng(np.random.default_rng(seed + 1))

    def _topic_init(self, rng: np.random.Generator) -> np.ndarray:
        # mean of the topic name's word embeddings; words outside the vocabulary get a fresh vector
        emb = self.decoder.word_emb.data.astype(np.float64)
        d = emb.shape[1]
        rows = []
        for name in self.topics:
            vecs = []
            for w in topic_words(name):
                if w in self.vocab.stoi:
                    vecs.append(emb[self.vocab.stoi[w]])
                else:
                    vecs.append(rng.normal(0.0, d ** -0.5, size=d))
            rows.append(np.mean(vecs, axis=0))
        return np.stack(rows)

    @property
    def topic_bag(self) -> TopicBag:
        return TopicBag(self.topics, self.topic_embedding)

    def parameters(self, include_head: bool = True) -> list[Tensor]:
        return [p for name, p in self.named_parameters() if include_head or not name.startswith("tag_head.")]

    # -- forward pieces ----------------------------------------------------
    def project(self, features) -> Tensor:
        x = T.as_tensor(np.asarray(features, dtype=self.dtype))
        if self.cfg.feature_kind == "raw":
            x = x @ self.W_in + self.b_in
        return x

    def encode(self, features, prior_reports) -> Encoded:
        image = self.project(features)
        post = self.poke(image, self.topic_embedding)
        nodes = self.graph(image.mean(axis=-2))
        reports = T.as_tensor(np.asarray(prior_reports, dtype=self.dtype))
        prior = self.prke(post.I_prime, reports, nodes)
        return Encoded(post, nodes, prior)

    def tag_logits(self, features) -> Tensor:
        image = self.project(features)
        post = self.poke(image, self.topic_embedding)
        return self.tag_head.logits(post.I_prime.mean(axis=-2))

    def forward(self, features, prior_reports, token_in, gates=None) -> DecoderOutput:
        enc = self.encode(features, prior_reports)
        return self.decoder.forward(token_in, enc.i_prime, enc.g_prime, enc.w_prime, gates)

    def loss(self, features, prior_reports, token_in, targets) -> Tensor:
        out = self.forward(features, prior_reports, token_in)
        return cross_entropy_loss(out.logits, targets)
