"""Synthetic document-structured corpus with a noisy acoustic channel.

Each document draws a latent topic that biases symbol choice, so adjacent
utterances are predictive of each other. A configurable fraction of symbols
form homophone pairs whose acoustic emission means coincide (or nearly so,
under `homophone_separation`): those tokens carry little or no acoustic
evidence and must be resolved mostly by linguistic context.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class CorpusConfigError(ValueError):
    pass


_CONSONANTS = "bdfgjklmnprstvz"
_VOWELS = "aeiou"


def _symbol_names(n):
    names = []
    for c in _CONSONANTS:
        for v in _VOWELS:
            names.append(c + v)
            if len(names) == n:
                return names
    for c1 in _CONSONANTS:
        for v in _VOWELS:
            for c2 in _CONSONANTS:
                names.append(c1 + v + c2)
                if len(names) == n:
                    return names
    raise CorpusConfigError(f"alphabet_size {n} too large")


@dataclass
class CorpusSpec:
    n_documents: int
    utterance_length_range: tuple = (3, 8)
    alphabet_size: int = 20
    homophone_rate: float = 0.4
    cross_utterance_strength: float = 0.8
    frame_noise_sigma: float = 0.3
    frames_per_token_range: tuple = (1, 2)
    utterances_per_document: tuple = (6, 10)
    frame_dim: int = 8
    n_topics: int = 2
    bigram_strength: float = 0.0  # 0 = i.i.d. symbols given topic
    homophone_separation: float = 0.0  # mean distance between pair partners
    homophone_topic_ratio: float = 12.0  # odds of the topic-favored partner

    def validate(self):
        for name, (lo, hi) in (("utterance_length_range", self.utterance_length_range),
                               ("frames_per_token_range", self.frames_per_token_range),
                               ("utterances_per_document", self.utterances_per_document)):
            if lo > hi or lo < 1:
                raise CorpusConfigError(f"invalid {name}: ({lo}, {hi})")
        for name, r in (("homophone_rate", self.homophone_rate),
                        ("cross_utterance_strength", self.cross_utterance_strength),
                        ("bigram_strength", self.bigram_strength)):
            if not 0.0 <= r <= 1.0:
                raise CorpusConfigError(f"{name} must be in [0,1], got {r}")
        if self.frame_noise_sigma < 0:
            raise CorpusConfigError("frame_noise_sigma must be >= 0")
        if self.homophone_separation < 0:
            raise CorpusConfigError("homophone_separation must be >= 0")
        if self.homophone_topic_ratio < 1:
            raise CorpusConfigError("homophone_topic_ratio must be >= 1")
        if self.n_documents < 0:
            raise CorpusConfigError("n_documents must be >= 0")

    @staticmethod
    def from_dict(d):
        spec = CorpusSpec(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in d.items()})
        spec.validate()
        return spec


@dataclass
class Utterance:
    tokens: list            # raw symbol strings (transcript)
    frames: np.ndarray      # (n_frames, frame_dim)
    doc_id: int
    index_in_doc: int

    @property
    def text(self):
        return " ".join(self.tokens)


@dataclass
class Document:
    doc_id: int
    utterances: list
    seed: int
    topic: int = 0

    def __len__(self):
        return len(self.utterances)


class EmissionModel:
    """Per-symbol Gaussian emission means; homophone partners share means,
    offset by `homophone_separation` along a random unit direction (zero
    separation makes partners acoustically indistinguishable)."""

    def __init__(self, spec: CorpusSpec, seed: int):
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE1]))
        n = spec.alphabet_size
        self.symbols = _symbol_names(n)
        n_pairs = int(n * spec.homophone_rate / 2)
        self.homophone_pairs = [(2 * i, 2 * i + 1) for i in range(n_pairs)]
        means = rng.normal(0.0, 1.0, size=(n, spec.frame_dim))
        for a, b in self.homophone_pairs:
            direction = rng.normal(size=spec.frame_dim)
            direction /= np.linalg.norm(direction)
            means[b] = means[a] + spec.homophone_separation * direction
        self.means = means

    def partner(self, sym_id):
        for a, b in self.homophone_pairs:
            if sym_id == a:
                return b
            if sym_id == b:
                return a
        return None


def pair_kind(k):
    """What disambiguates homophone pair k: the next symbol ("next"), the
    document topic ("topic"), or the previous symbol ("prev"). The kinds
    exercise different context: "prev" is visible to any left-context
    model, "next" only to bidirectional ones, and "topic" only to models
    that see surrounding utterances. The cycle weights "next" double, so
    right context carries most of the disambiguation burden."""
    return ("next", "topic", "next", "prev")[k % 4]


def homophone_pair_list(spec: CorpusSpec):
    n_pairs = int(spec.alphabet_size * spec.homophone_rate / 2)
    return [(2 * i, 2 * i + 1) for i in range(n_pairs)]


def topic_distributions(spec: CorpusSpec, seed: int):
    """Per-topic symbol distributions, mixed toward uniform by strength.

    Non-homophone weights are shared across topics; each topic only flips
    which member of every topic-disambiguated homophone pair it favors
    (by `homophone_topic_ratio` odds, random per topic and pair). Topic
    evidence therefore comes from those pairs' occurrences alone, so a
    short utterance identifies the topic far less reliably than a wide
    cross-utterance window does.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70]))
    n = spec.alphabet_size
    c = spec.cross_utterance_strength
    pairs = homophone_pair_list(spec)
    base_w = rng.gamma(2.0, 1.0, size=n)
    coins = rng.integers(0, 2, size=(spec.n_topics, len(pairs)))
    hi = 0.8 * np.sqrt(spec.homophone_topic_ratio)
    lo = 0.8 / np.sqrt(spec.homophone_topic_ratio)
    dists = []
    for t in range(spec.n_topics):
        w = base_w.copy()
        for k, (a, b) in enumerate(pairs):
            if pair_kind(k) != "topic":
                continue
            fav, dis = (a, b) if coins[t, k] == 0 else (b, a)
            w[fav] = hi
            w[dis] = lo
        topical = w / w.sum()
        dists.append((1.0 - c) / n + c * topical)
    return np.stack(dists)


def follower_matrix(spec: CorpusSpec, seed: int):
    """Binary symbol-succession preferences, (n_topics, n, n).

    Each symbol allows roughly half the alphabet as followers; sampling
    mixes this constraint in by `bigram_strength`. The matrix is shared
    across topics, so transitions carry no topic information. Homophone
    partners are wired by pair kind: "prev" pairs get complementary
    follower columns (the previous symbol identifies the member), "next"
    pairs complementary follower rows (only the following symbol does),
    and "topic" pairs share both rows and columns (syntactically
    interchangeable; only the document topic separates them).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB1]))
    n = spec.alphabet_size
    allowed = (rng.random((n, n)) < 0.5).astype(float)
    for k, (a, b) in enumerate(homophone_pair_list(spec)):
        kind = pair_kind(k)
        if kind == "prev":
            allowed[:, b] = 1.0 - allowed[:, a]
            allowed[b, :] = allowed[a, :]
        elif kind == "next":
            allowed[:, b] = allowed[:, a]
            allowed[b, :] = 1.0 - allowed[a, :]
        else:
            allowed[:, b] = allowed[:, a]
            allowed[b, :] = allowed[a, :]
    allowed[allowed.sum(axis=1) == 0, :] = 1.0  # no dead ends
    return np.tile(allowed[None, :, :], (spec.n_topics, 1, 1))


def _next_symbol_dist(topic_dist, allowed_row, bigram_strength):
    w = topic_dist * ((1.0 - bigram_strength) + bigram_strength * allowed_row)
    total = w.sum()
    if total <= 0:
        w = topic_dist.copy()
        total = w.sum()
    return w / total


def emit_frames(tokens, spec: CorpusSpec, emission: EmissionModel, rng):
    """Sample acoustic frames for a symbol sequence."""
    if not tokens:
        raise CorpusConfigError("emit_frames requires a nonempty token sequence")
    lo, hi = spec.frames_per_token_range
    sym_index = {s: i for i, s in enumerate(emission.symbols)}
    rows = []
    for tok in tokens:
        mean = emission.means[sym_index[tok]]
        count = int(rng.integers(lo, hi + 1))
        noise = rng.normal(0.0, spec.frame_noise_sigma,
                           size=(count, spec.frame_dim))
        rows.append(mean + noise)
    return np.concatenate(rows, axis=0)


def _generate_document(doc_id, spec, emission, topic_dists, allowed, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, doc_id]))
    topic = int(rng.integers(spec.n_topics))
    dist = topic_dists[topic]
    n_utts = int(rng.integers(spec.utterances_per_document[0],
                              spec.utterances_per_document[1] + 1))
    lo, hi = spec.utterance_length_range
    allow_t = allowed[topic]
    utterances = []
    prev_sym = None
    for idx in range(n_utts):
        length = int(rng.integers(lo, hi + 1))
        sym_ids = []
        for t in range(length):
            if prev_sym is None or spec.bigram_strength == 0:
                p = dist
            else:
                p = _next_symbol_dist(dist, allow_t[prev_sym],
                                      spec.bigram_strength)
            sym_ids.append(int(rng.choice(spec.alphabet_size, p=p)))
            prev_sym = sym_ids[-1]
        tokens = [emission.symbols[s] for s in sym_ids]
        frames = emit_frames(tokens, spec, emission, rng)
        utterances.append(Utterance(tokens, frames, doc_id, idx))
    return Document(doc_id, utterances, seed, topic)


def generate_corpus(spec: CorpusSpec, seed: int):
    """Deterministic corpus generation; per-document derived RNG streams."""
    spec.validate()
    emission = EmissionModel(spec, seed)
    topic_dists = topic_distributions(spec, seed)
    allowed = follower_matrix(spec, seed)
    return [_generate_document(d, spec, emission, topic_dists, allowed, seed)
            for d in range(spec.n_documents)]


# -- serialization ------------------------------------------------------------

def save_corpus(documents, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames_path = out_dir / "frames.bin"
    with open(out_dir / "utterances.jsonl", "w") as meta, \
            open(frames_path, "wb") as fb:
        for doc in documents:
            for utt in doc.utterances:
                offset = fb.tell()
                arr = utt.frames.astype("<f4")
                fb.write(struct.pack("<II", arr.shape[1], arr.shape[0]))
                fb.write(arr.tobytes())
                meta.write(json.dumps({
                    "doc_id": utt.doc_id,
                    "index_in_doc": utt.index_in_doc,
                    "text": utt.text,
                    "frames_offset": offset,
                }) + "\n")


def load_corpus(in_dir):
    in_dir = Path(in_dir)
    frames_blob = (in_dir / "frames.bin").read_bytes()
    docs = {}
    with open(in_dir / "utterances.jsonl") as f:
        for line in f:
            rec = json.loads(line)
            off = rec["frames_offset"]
            dim, count = struct.unpack_from("<II", frames_blob, off)
            frames = np.frombuffer(frames_blob, dtype="<f4",
                                   count=dim * count, offset=off + 8)
            frames = frames.reshape(count, dim).astype(np.float64)
            utt = Utterance(rec["text"].split(), frames,
                            rec["doc_id"], rec["index_in_doc"])
            docs.setdefault(rec["doc_id"], []).append(utt)
    return [Document(d, sorted(utts, key=lambda u: u.index_in_doc), seed=-1)
            for d, utts in sorted(docs.items())]


def split_documents(documents, train_frac=0.8, dev_frac=0.1):
    """Document-level train/dev/test split; no document straddles splits."""
    n = len(documents)
    n_train = int(n * train_frac)
    n_dev = int(n * dev_frac)
    return (documents[:n_train],
            documents[n_train:n_train + n_dev],
            documents[n_train + n_dev:])
