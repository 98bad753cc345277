"""Corpus preparation: tokenizer, vocabulary, topic labels, feature files and a
planted-signal synthetic corpus."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (DataError, FeatureFileError, FeatureShapeError,
                     FeatureTruncatedError, FeatureVersionError)
from .mkd import BOS, EOS, PAD, UNK
from .poke import TOPICS

log = logging.getLogger(__name__)

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

# sentence punctuation is split off; anything else glued to a word (x-ray, 1.5cm) kills the token
_PUNCT = re.compile(r'([,;:!?()"\[\]]|(?<!\d)\.|\.(?!\d))')
_ALPHA = re.compile(r"^[a-z]+$")


def tokenize(text: str) -> list[str]:
    text = _PUNCT.sub(r" \1 ", text.lower())
    out: list[str] = []
    for tok in text.split():
        if tok == ".":
            if out and out[-1] == ".":
                continue
            out.append(tok)
        elif _ALPHA.match(tok):
            out.append(tok)
    return out


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


@dataclass
class Vocabulary:
    itos: list[str]
    frequencies: dict[str, int]
    policy: dict

    def __post_init__(self):
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def to_dict(self) -> dict:
        return {"itos": self.itos, "frequencies": self.frequencies, "policy": self.policy}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(list(d["itos"]), dict(d["frequencies"]), dict(d["policy"]))


def build_vocab(token_lists: Iterable[Sequence[str]], top_k: int | None = None,
                min_freq: int | None = None) -> Vocabulary:
    """Vocabulary from training-split token lists.

    ``top_k`` keeps the K most frequent tokens, ``min_freq`` drops tokens seen
    fewer times; frequency ties are broken lexicographically.
    """
    counts: Counter = Counter()
    n_docs = 0
    for toks in token_lists:
        counts.update(toks)
        n_docs += 1
    if n_docs == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if min_freq is not None:
        ranked = [kv for kv in ranked if kv[1] >= min_freq]
    if top_k is not None:
        ranked = ranked[:top_k]
    total = sum(counts.values())
    covered = sum(c for _, c in ranked)
    coverage = covered / total if total else 0.0
    policy = {"top_k": top_k, "min_freq": min_freq, "coverage": coverage}
    log.info("vocabulary: %d tokens kept, %.2f%% of occurrences covered", len(ranked), 100 * coverage)
    return Vocabulary(list(RESERVED) + [t for t, _ in ranked], dict(ranked), policy)


def topic_words(topic: str) -> list[str]:
    return topic.split()


def derive_topic_labels(tokens: Sequence[str], topics: Sequence[str] = TOPICS) -> np.ndarray:
    """One bit per topic: set when any word of the topic's name occurs.

    ``normal`` is set exactly when no other topic fires; ``other`` is never set.
    """
    present = set(tokens)
    bits = np.zeros(len(topics), dtype=np.int8)
    for i, name in enumerate(topics):
        if name in ("normal", "other"):
            continue
        if present.intersection(topic_words(name)):
            bits[i] = 1
    if "normal" in topics:
        bits[list(topics).index("normal")] = 0 if bits.any() else 1
    return bits


# -- report embeddings -------------------------------------------------------
def _token_vector(token: str, d: int, seed: int) -> np.ndarray:
    h = hashlib.sha256(f"{seed}:{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(h[:8], "little"))
    return rng.standard_normal(d)


class ReportEmbedder:
    """Hashed bag-of-words random projection, unit-normalised."""

    def __init__(self, d: int, seed: int = 0):
        self.d = d
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, tokens: Sequence[str]) -> np.ndarray:
        v = np.zeros(self.d)
        # sorted so the sum does not depend on word order
        for tok, c in sorted(Counter(tokens).items()):
            if tok not in self._cache:
                self._cache[tok] = _token_vector(tok, self.d, self.seed)
            v += c * self._cache[tok]
        n = np.linalg.norm(v)
        return v / n if n > 0 else v


# -- records and splits ------------------------------------------------------
@dataclass
class CorpusRecord:
    id: str
    report: str
    patch_features: np.ndarray
    image_embedding: np.ndarray
    topic_labels: np.ndarray
    patient_id: str | None = None

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.report)


@dataclass
class SplitManifest:
    seed: int
    train: list[str]
    val: list[str]
    test: list[str]

    def __post_init__(self):
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise DataError("split manifest lists overlap")

    def ids(self, split: str) -> list[str]:
        if split not in ("train", "val", "test"):
            raise DataError(f"unknown split {split!r}")
        return list(getattr(self, split))

    def save(self, path) -> None:
        _atomic_write_text(path, json.dumps({"seed": self.seed, "train": self.train,
                                             "val": self.val, "test": self.test}, indent=1))

    @classmethod
    def load(cls, path) -> "SplitManifest":
        with open(path) as fh:
            d = json.load(fh)
        return cls(d["seed"], d["train"], d["val"], d["test"])


def make_splits(ids: Sequence[str], seed: int, patient_ids: Sequence[str | None] | None = None,
                fractions=(0.7, 0.1, 0.2)) -> SplitManifest:
    """Seeded split; all records of a patient land in the same split."""
    groups: dict[str, list[str]] = {}
    for i, rid in enumerate(ids):
        key = rid if patient_ids is None or patient_ids[i] is None else f"patient:{patient_ids[i]}"
        groups.setdefault(key, []).append(rid)
    keys = sorted(groups)
    order = np.random.default_rng(seed).permutation(len(keys))
    n = len(ids)
    t_end, v_end = round(fractions[0] * n), round((fractions[0] + fractions[1]) * n)
    train, val, test = [], [], []
    taken = 0
    for k in order:
        members = groups[keys[k]]
        dest = train if taken < t_end else val if taken < v_end else test
        dest.extend(members)
        taken += len(members)
    return SplitManifest(seed, train, val, test)


# -- corpus files ------------------------------------------------------------
def _atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_corpus_jsonl(path, records: Sequence[CorpusRecord]) -> None:
    lines = []
    for r in records:
        row = {"id": r.id, "report": r.report}
        if r.patient_id is not None:
            row["patient_id"] = r.patient_id
        lines.append(json.dumps(row))
    _atomic_write_text(path, "\n".join(lines) + "\n")


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return rows


# -- feature files -----------------------------------------------------------
FEATURE_MAGIC = b"PPKF"
FEATURE_VERSION = 1


@dataclass
class FeatureSet:
    ids: list[str]
    features: np.ndarray          # (count, n_patches, dim) float32
    kind: str = "projected"       # "raw" -> the model applies a learned projection

    def by_id(self) -> dict[str, np.ndarray]:
        return {rid: self.features[i] for i, rid in enumerate(self.ids)}


def write_features(path, fs: FeatureSet) -> None:
    arr = np.ascontiguousarray(fs.features, dtype="<f4")
    if arr.ndim != 3 or arr.shape[0] != len(fs.ids):
        raise FeatureShapeError(f"features must be (count, patches, dim) with one row per id; got {arr.shape}")
    header = json.dumps({"count": arr.shape[0], "n_patches": arr.shape[1], "dim": arr.shape[2],
                         "kind": fs.kind, "ids": fs.ids}).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<HI", FEATURE_VERSION, len(header)))
        fh.write(header)
        fh.write(arr.tobytes())
    os.replace(tmp, path)


def load_features(path, n_patches: int | None = None, dim: int | None = None) -> FeatureSet:
    """Read a feature file, validating the header against the expected shape."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError as exc:
        raise FeatureFileError(f"feature file not found: {path}") from exc
    if len(blob) < 10 or blob[:4] != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic, not a feature file")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != FEATURE_VERSION:
        raise FeatureVersionError(f"{path}: feature format version {version}, expected {FEATURE_VERSION}")
    if len(blob) < 10 + hlen:
        raise FeatureTruncatedError(f"{path}: header truncated")
    header = json.loads(blob[10:10 + hlen])
    count, npat, d = header["count"], header["n_patches"], header["dim"]
    if n_patches is not None and npat != n_patches:
        raise FeatureShapeError(f"{path}: expected N_I={n_patches} patches per image, file has {npat}")
    if dim is not None and d != dim:
        raise FeatureShapeError(f"{path}: expected feature width {dim}, file has {d}")
    need = count * npat * d * 4
    body = blob[10 + hlen:]
    if len(body) < need:
        raise FeatureTruncatedError(f"{path}: expected {need} bytes of features, found {len(body)}")
    arr = np.frombuffer(body, "<f4", count * npat * d).reshape(count, npat, d).copy()
    return FeatureSet(list(header["ids"]), arr, header.get("kind", "projected"))


# -- synthetic corpus --------------------------------------------------------
ORGANS = ("heart", "pleura", "lung", "bone")

# normality sentences per organ and writing style; each contains a normality cue word
NORMAL_SENTENCES = {
    "heart": ("heart size is normal .", "the cardiac silhouette is normal in size ."),
    "pleura": ("there is no pleural fluid .", "the costophrenic angles are clear ."),
    "lung": ("the lungs are clear .", "no focal consolidation is seen ."),
    "bone": ("the osseous structures are stable .", "no acute bony abnormality ."),
}

# abnormal finding sentences per topic and style; never contain a normality cue word
FINDING_SENTENCES = {
    "cardiomegaly": ("mild cardiomegaly is present .", "there is moderate cardiomegaly ."),
    "effusion": ("small left pleural effusion .", "there is a right sided effusion ."),
    "pneumothorax": ("small apical pneumothorax is seen .", "there is a left pneumothorax ."),
    "emphysema": ("the lungs are hyperexpanded with emphysema .", "changes of emphysema ."),
    "pneumonia": ("right lower lobe pneumonia .", "findings suggest left basilar pneumonia ."),
    "edema": ("mild interstitial edema .", "pulmonary edema is present ."),
    "scoliosis": ("thoracic scoliosis .", "mild scoliosis of the spine ."),
    "fractures": ("old healed rib fractures .", "there are old fractures of the ribs ."),
}

TOPIC_ORGAN = {
    "cardiomegaly": "heart", "effusion": "pleura", "pneumothorax": "pleura",
    "emphysema": "lung", "pneumonia": "lung", "edema": "lung",
    "scoliosis": "bone", "fractures": "bone",
}

DEFAULT_PLANTED = tuple(FINDING_SENTENCES)


@dataclass
class SynthConfig:
    num_records: int = 100
    seed: int = 0
    abnormality_rate: float = 0.3
    n_patches: int = 8
    feature_dim: int = 32
    noise: float = 0.3
    signal: float = 2.0
    styles: int = 2
    max_topics: int = 2
    planted_topics: tuple[str, ...] = DEFAULT_PLANTED
    records_per_patient: int = 1


@dataclass
class SyntheticCorpus:
    records: list[CorpusRecord]
    manifest: SplitManifest
    planted_patch: dict[str, int] = field(default_factory=dict)
    active_topics: dict[str, list[str]] = field(default_factory=dict)

    def by_id(self) -> dict[str, CorpusRecord]:
        return {r.id: r for r in self.records}


def planted_patch_of(planted: Sequence[str], n_patches: int) -> dict[str, int]:
    """Patch block carrying each planted topic's signature; patch 0 carries style."""
    usable = max(n_patches - 1, 1)
    return {t: 1 + (i % usable) if n_patches > 1 else 0 for i, t in enumerate(planted)}


def synth_corpus(cfg: SynthConfig) -> SyntheticCorpus:
    """Deterministic planted-signal corpus.

    Every record draws a writing style and, with probability
    ``abnormality_rate``, 1..max_topics planted topics. Each planted topic
    adds its signature to a fixed patch; the style adds its signature to
    patch 0. Reports list one sentence per organ in a fixed order: finding
    sentences for affected organs, the style's normality sentence otherwise.
    """
    for t in cfg.planted_topics:
        if t not in FINDING_SENTENCES:
            raise DataError(f"no finding templates for planted topic {t!r}")
    rng = np.random.default_rng(cfg.seed)
    d, npat = cfg.feature_dim, cfg.n_patches
    topic_sig = {t: rng.standard_normal(d) for t in cfg.planted_topics}
    style_sig = [rng.standard_normal(d) for _ in range(cfg.styles)]
    for v in list(topic_sig.values()) + style_sig:
        v *= cfg.signal / np.linalg.norm(v)
    where = planted_patch_of(cfg.planted_topics, npat)

    records, active = [], {}
    width = len(str(max(cfg.num_records - 1, 1)))
    for i in range(cfg.num_records):
        rid = f"r{i:0{width}d}"
        style = int(rng.integers(cfg.styles))
        topics: list[str] = []
        if rng.random() < cfg.abnormality_rate:
            k = int(rng.integers(1, cfg.max_topics + 1))
            pick = rng.choice(len(cfg.planted_topics), size=min(k, len(cfg.planted_topics)), replace=False)
            topics = [cfg.planted_topics[j] for j in sorted(pick)]
        feats = rng.normal(0.0, cfg.noise, size=(npat, d))
        feats[0] += style_sig[style]
        for t in topics:
            feats[where[t]] += topic_sig[t]
        sentences = []
        for organ in ORGANS:
            hits = [t for t in topics if TOPIC_ORGAN[t] == organ]
            if hits:
                sentences.extend(FINDING_SENTENCES[t][style % len(FINDING_SENTENCES[t])] for t in hits)
            else:
                sentences.append(NORMAL_SENTENCES[organ][style % len(NORMAL_SENTENCES[organ])])
        report = " ".join(sentences)
        feats = feats.astype(np.float32)
        patient = f"p{i // max(cfg.records_per_patient, 1):0{width}d}"
        records.append(CorpusRecord(rid, report, feats, feats.mean(axis=0),
                                    derive_topic_labels(tokenize(report)), patient))
        active[rid] = topics
    manifest = make_splits([r.id for r in records], cfg.seed, [r.patient_id for r in records])
    return SyntheticCorpus(records, manifest, where, active)


def normality_sentence_share(reports: Iterable[str]) -> float:
    from .mkd import sentence_class, split_sentences
    total = normal = 0
    for rep in reports:
        toks = tokenize(rep)
        for sent in split_sentences(toks):
            total += 1
            normal += sentence_class(toks[i] for i in sent) == "normality"
    return normal / total if total else 1.0


def jaccard(a: Iterable, b: Iterable) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)
