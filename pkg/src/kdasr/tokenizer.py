"""Byte-pair-encoding subword vocabulary shared by the student and teachers.

Words are space-separated; merges never cross word boundaries. Each word is
segmented into characters with an end-of-word marker appended, so decoding
is an exact inverse of encoding for any text over the training alphabet.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass


# End-of-word marker appended to each word before merging. Chosen to sort
# after all ASCII letters so frequency ties between a letter pair and a
# letter+marker pair resolve toward the letter pair.
EOW = "·"

PAD, SOS, EOS, MASK, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["<pad>", "<sos>", "</s>", "[MASK]", "<unk>"]
N_SPECIALS = len(SPECIAL_TOKENS)


class TokenizerError(ValueError):
    pass


@dataclass
class Vocabulary:
    id_to_token: list
    token_to_id: dict
    merges: list  # ordered (left, right) pairs

    def __post_init__(self):
        self._merge_rank = {pair: i for i, pair in enumerate(self.merges)}
        self._word_cache = {}

    @property
    def size(self):
        return len(self.id_to_token)

    def content_hash(self):
        import hashlib
        h = hashlib.sha256()
        for t in self.id_to_token:
            h.update(t.encode() + b"\n")
        for a, b in self.merges:
            h.update(f"{a} {b}\n".encode())
        return h.hexdigest()[:16]

    # -- encoding -------------------------------------------------------------

    def _segment_word(self, word):
        cached = self._word_cache.get(word)
        if cached is not None:
            return cached
        symbols = list(word[:-len(EOW)]) + [EOW] if word.endswith(EOW) else list(word)
        while len(symbols) > 1:
            best = None
            best_rank = None
            for pair in zip(symbols, symbols[1:]):
                rank = self._merge_rank.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best, best_rank = pair, rank
            if best is None:
                break
            merged = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                    merged.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        self._word_cache[word] = symbols
        return symbols

    def encode(self, text):
        """Text -> token ids. Unknown base symbols map to UNK."""
        ids = []
        for word in text.split():
            for sym in self._segment_word(word + EOW):
                ids.append(self.token_to_id.get(sym, UNK))
        return ids

    def decode(self, ids):
        """Token ids -> text. Specials are dropped."""
        parts = []
        for i in ids:
            if i < 0 or i >= self.size:
                raise TokenizerError(f"token id {i} out of range (V={self.size})")
            if i < N_SPECIALS:
                continue
            parts.append(self.id_to_token[i])
        return "".join(parts).replace(EOW, " ").strip()

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        with open(path, "w") as f:
            f.write(f"# specials {N_SPECIALS}\n")
            f.write(f"# tokens {self.size}\n")
            for t in self.id_to_token:
                f.write(t + "\n")
            f.write("# merges\n")
            for a, b in self.merges:
                f.write(f"{a} {b}\n")

    @staticmethod
    def load(path):
        with open(path) as f:
            lines = [ln.rstrip("\n") for ln in f]
        assert lines[0].startswith("# specials")
        n_tokens = int(lines[1].split()[-1])
        tokens = lines[2:2 + n_tokens]
        assert lines[2 + n_tokens] == "# merges"
        merges = [tuple(ln.split(" ")) for ln in lines[3 + n_tokens:] if ln]
        return Vocabulary(tokens, {t: i for i, t in enumerate(tokens)}, merges)


def bpe_train(corpus_text, target_vocab_size):
    """Greedy highest-frequency pair merging over word-internal symbols.

    Stops when the vocabulary reaches `target_vocab_size` or no pair occurs
    at least twice. Ties break on the lexicographically smallest merged
    string.
    """
    if not corpus_text or all(not t.strip() for t in corpus_text):
        raise TokenizerError("cannot train BPE on an empty corpus")

    word_freq = Counter()
    for utt in corpus_text:
        for word in utt.split():
            word_freq[word + EOW] += 1

    # word -> current symbol sequence
    segmentations = {w: list(w[:-len(EOW)]) + [EOW] for w in word_freq}

    base = sorted({s for seg in segmentations.values() for s in seg})
    if target_vocab_size <= len(base) + N_SPECIALS:
        if target_vocab_size < len(base) + N_SPECIALS:
            raise TokenizerError(
                f"target vocab {target_vocab_size} below base alphabet "
                f"{len(base)} + {N_SPECIALS} specials")

    tokens = list(SPECIAL_TOKENS) + base
    merges = []

    while len(tokens) < target_vocab_size:
        pair_freq = Counter()
        for w, seg in segmentations.items():
            f = word_freq[w]
            for pair in zip(seg, seg[1:]):
                pair_freq[pair] += f
        if not pair_freq:
            break
        best_count = max(pair_freq.values())
        if best_count < 2:
            break
        best = min((p for p, c in pair_freq.items() if c == best_count),
                   key=lambda p: p[0] + p[1])
        merges.append(best)
        new_sym = best[0] + best[1]
        for w, seg in segmentations.items():
            if best[0] not in seg:
                continue
            merged = []
            i = 0
            while i < len(seg):
                if i + 1 < len(seg) and (seg[i], seg[i + 1]) == best:
                    merged.append(new_sym)
                    i += 2
                else:
                    merged.append(seg[i])
                    i += 1
            segmentations[w] = merged
        tokens.append(new_sym)

    return Vocabulary(tokens, {t: i for i, t in enumerate(tokens)}, merges)
