"""Prior knowledge: retrieved reports and the organ-grouped topic graph."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionBlock
from .errors import DataError, LeakageError, ShapeError
from .nn import Module, init_matrix
from .tensor import Tensor

INDEX_MAGIC = b"PPKIDX\x00\x01"
INDEX_VERSION = 1


class RetrievalIndex:
    """Exact cosine top-K over image embeddings, returning report embeddings."""

    def __init__(self, d_img: int, d: int):
        self.d_img = d_img
        self.d = d
        self.ids: list[str] = []
        self._pos: dict[str, int] = {}
        self._img = np.zeros((0, d_img))
        self._rep = np.zeros((0, d))
        self._unit = self._img
        self._live = np.zeros(0, dtype=bool)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._pos

    @property
    def image_embeddings(self) -> np.ndarray:
        return self._img

    @property
    def report_embeddings(self) -> np.ndarray:
        return self._rep

    def add(self, records: Iterable[tuple[str, np.ndarray, np.ndarray]]) -> None:
        ids, imgs, reps = [], [], []
        for rid, img, rep in records:
            img = np.asarray(img, dtype=np.float64).reshape(-1)
            rep = np.asarray(rep, dtype=np.float64).reshape(-1)
            if rid in self._pos or rid in ids:
                raise DataError(f"duplicate record id in index: {rid!r}")
            if img.shape[0] != self.d_img:
                raise ShapeError(f"record {rid!r}: image embedding width {img.shape[0]}, index expects {self.d_img}")
            if rep.shape[0] != self.d:
                raise ShapeError(f"record {rid!r}: report embedding width {rep.shape[0]}, index expects {self.d}")
            ids.append(rid)
            imgs.append(img)
            reps.append(rep)
        if not ids:
            return
        for rid in ids:
            self._pos[rid] = len(self.ids)
            self.ids.append(rid)
        self._img = np.vstack([self._img, np.stack(imgs)])
        self._rep = np.vstack([self._rep, np.stack(reps)])
        norms = np.linalg.norm(self._img, axis=1)
        self._unit = np.divide(self._img, norms[:, None], out=np.zeros_like(self._img), where=norms[:, None] > 0)
        self._live = norms > 0

    def cosine_scores(self, query: np.ndarray) -> np.ndarray:
        """Cosine of ``query`` against every entry; zero-norm pairs score -inf."""
        query = np.asarray(query, dtype=np.float64).reshape(-1)
        if query.shape[0] != self.d_img:
            raise ShapeError(f"query width {query.shape[0]}, index expects {self.d_img}")
        qn = np.linalg.norm(query)
        if qn == 0 or not len(self):
            return np.full(len(self), -np.inf)
        # row-wise reduction so identical rows get identical scores
        scores = (self._unit * (query / qn)).sum(axis=1)
        scores[~self._live] = -np.inf
        return scores

    def retrieve_topk(self, query: np.ndarray, k: int, exclude: Sequence[str] = ()) -> list[tuple[str, float, np.ndarray]]:
        """Top ``k`` by cosine, descending; ties keep insertion order."""
        scores = self.cosine_scores(query)
        keep = np.ones(len(self), dtype=bool)
        for rid in exclude:
            if rid in self._pos:
                keep[self._pos[rid]] = False
        available = int(keep.sum())
        if k > available:
            raise DataError(f"requested top-{k} but only {available} records are searchable")
        cand = np.flatnonzero(keep)
        order = cand[np.argsort(-scores[cand], kind="stable")][:k]
        return [(self.ids[i], float(scores[i]), self._rep[i]) for i in order]

    def prior_reports(self, query: np.ndarray, k: int, exclude: Sequence[str] = ()) -> np.ndarray:
        """The stacked K x d report matrix for one query."""
        hits = self.retrieve_topk(query, k, exclude)
        return np.stack([h[2] for h in hits])

    def assert_disjoint(self, record_ids: Iterable[str]) -> None:
        leaked = sorted(r for r in record_ids if r in self._pos)
        if leaked:
            raise LeakageError(f"{len(leaked)} held-out ids are present in the retrieval index: {leaked[:5]}")

    # -- persistence -------------------------------------------------------
    def save(self, path: str | os.PathLike) -> None:
        header = json.dumps({"version": INDEX_VERSION, "d_img": self.d_img, "d": self.d,
                             "count": len(self)}).encode()
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(INDEX_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for i, rid in enumerate(self.ids):
                raw = rid.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(self._img[i].astype("<f8").tobytes())
                fh.write(self._rep[i].astype("<f8").tobytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RetrievalIndex":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:len(INDEX_MAGIC)] != INDEX_MAGIC:
            raise DataError(f"{path}: not a retrieval index file")
        off = len(INDEX_MAGIC)
        (hlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        header = json.loads(blob[off:off + hlen])
        off += hlen
        if header.get("version") != INDEX_VERSION:
            raise DataError(f"{path}: index version {header.get('version')} unsupported")
        index = cls(header["d_img"], header["d"])
        recs = []
        try:
            for _ in range(header["count"]):
                (n,) = struct.unpack_from("<H", blob, off)
                off += 2
                rid = blob[off:off + n].decode("utf-8")
                off += n
                img = np.frombuffer(blob, "<f8", index.d_img, off)
                off += 8 * index.d_img
                rep = np.frombuffer(blob, "<f8", index.d, off)
                off += 8 * index.d
                recs.append((rid, img.copy(), rep.copy()))
        except (struct.error, ValueError) as exc:
            raise DataError(f"{path}: truncated index file") from exc
        index.add(recs)
        return index


def build_index(records: Sequence[tuple[str, np.ndarray, np.ndarray]], k: int | None = None) -> RetrievalIndex:
    """Index (id, image embedding, report embedding) triples from the training split."""
    records = list(records)
    need = 1 if k is None else k
    if len(records) < need:
        raise DataError(f"index requires >= {need} records (N_K) or an explicit smaller K; got {len(records)}")
    index = RetrievalIndex(len(np.ravel(records[0][1])), len(np.ravel(records[0][2])))
    index.add(records)
    return index


# -- knowledge graph ---------------------------------------------------------
def default_grouping_text() -> str:
    return resources.files("ppked").joinpath("graph_groups.txt").read_text()


def parse_grouping(text: str) -> dict[str, list[str]]:
    """Parse ``group: topic, topic`` lines; ``#`` starts a comment."""
    groups: dict[str, list[str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise DataError(f"graph grouping line {lineno}: expected 'group: topic, ...'")
        name, members = line.split(":", 1)
        groups[name.strip()] = [m.strip() for m in members.split(",") if m.strip()]
    return groups


@dataclass
class KnowledgeGraph:
    node_names: tuple[str, ...]
    groups: dict[str, list[str]]
    adjacency: np.ndarray

    @classmethod
    def from_groups(cls, node_names: Sequence[str], groups: dict[str, list[str]]) -> "KnowledgeGraph":
        node_names = tuple(node_names)
        pos = {n: i for i, n in enumerate(node_names)}
        seen: set[str] = set()
        adj = np.zeros((len(node_names), len(node_names)))
        for gname, members in groups.items():
            for m in members:
                if m not in pos:
                    raise DataError(f"graph group {gname!r} names unknown topic {m!r}")
                if m in seen:
                    raise DataError(f"topic {m!r} appears in more than one group")
                seen.add(m)
            idx = [pos[m] for m in members]
            for i in idx:
                for j in idx:
                    if i != j:
                        adj[i, j] = 1.0
        return cls(node_names, dict(groups), adj)

    @classmethod
    def default(cls, node_names: Sequence[str]) -> "KnowledgeGraph":
        groups = parse_grouping(default_grouping_text())
        names = set(node_names)
        groups = {g: [m for m in ms if m in names] for g, ms in groups.items()}
        return cls.from_groups(node_names, {g: ms for g, ms in groups.items() if ms})

    def normalized_adjacency(self) -> np.ndarray:
        """D^-1/2 (A + I) D^-1/2."""
        a = self.adjacency + np.eye(len(self.node_names))
        dinv = 1.0 / np.sqrt(a.sum(axis=1))
        return a * dinv[:, None] * dinv[None, :]


class GraphEncoder(Module):
    """Image-conditioned GCN over the topic graph, producing one row per topic."""

    def __init__(self, graph: KnowledgeGraph, d: int, rng: np.random.Generator, dtype=np.float32,
                 layers: int = 2, node_init: np.ndarray | None = None):
        self.graph = graph
        self.a_hat = Tensor(graph.normalized_adjacency().astype(dtype))
        n = len(graph.node_names)
        if node_init is None:
            node_init = rng.normal(0.0, 1.0 / np.sqrt(d), size=(n, d))
        self.node_init = Tensor(np.asarray(node_init, dtype=dtype).copy(), requires_grad=True)
        self.W_ctx = init_matrix(rng, d, d, dtype)
        self.layers = [_GcnLayer(d, rng, dtype) for _ in range(layers)]

    def __call__(self, image_context: Tensor) -> Tensor:
        if image_context.shape[-1] != self.node_init.shape[-1]:
            raise ShapeError(f"image context width {image_context.shape[-1]} vs node width {self.node_init.shape[-1]}")
        ctx = image_context @ self.W_ctx
        h = self.node_init + ctx.reshape(ctx.shape[:-1] + (1, ctx.shape[-1]))
        for layer in self.layers:
            h = T.relu(self.a_hat @ h @ layer.W)
        return h


class _GcnLayer(Module):
    def __init__(self, d, rng, dtype):
        self.W = init_matrix(rng, d, d, dtype)


def graph_propagate(encoder: GraphEncoder, image_context: Tensor) -> Tensor:
    return encoder(image_context)


@dataclass
class PriorOutput:
    W_prime: Tensor
    G_prime: Tensor
    experience_attention: np.ndarray
    knowledge_attention: np.ndarray


class PriorExplorer(Module):
    """Attend from I' into retrieved reports and into graph nodes, independently."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, dtype=np.float32,
                 dropout: float = 0.1, depth: int = 1):
        self.experience_blocks = [AttentionBlock(d, n_heads, rng, dtype, dropout) for _ in range(depth)]
        self.knowledge_blocks = [AttentionBlock(d, n_heads, rng, dtype, dropout) for _ in range(depth)]

    def __call__(self, i_prime: Tensor, reports: Tensor, nodes: Tensor) -> PriorOutput:
        for src in (reports, nodes):
            if src.shape[-1] != i_prime.shape[-1]:
                raise ShapeError(f"prior source width {src.shape[-1]} vs I' width {i_prime.shape[-1]}")
        w = i_prime
        for block in self.experience_blocks:
            w, w_att = block.forward(w, reports)
        g = i_prime
        for block in self.knowledge_blocks:
            g, g_att = block.forward(g, nodes)
        return PriorOutput(w, g, w_att, g_att)


def explore_prior(i_prime: Tensor, reports: Tensor, nodes: Tensor, explorer: PriorExplorer) -> PriorOutput:
    return explorer(i_prime, reports, nodes)
