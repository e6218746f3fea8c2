"""Context-window assembly, masked teacher queries, temperature top-K soft
labels, and the interpolated training objective.

Soft labels are precomputed once per (teacher, window, K, temperature)
configuration and stored in a line-delimited file keyed by utterance, so
student training never runs the teacher.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tokenizer as tok
from .tensor import ShapeError, Tensor, UsageError


class ConfigError(ValueError):
    pass


class WindowError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class DistillConfig:
    window: int = 64        # total token budget L + R + N
    top_k: int = 8
    temperature: float = 2.0
    alpha: float = 0.5
    label_smoothing: float = 0.1
    smooth_hard_label_when_distilling: bool = False

    def validate(self):
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0,1], got {self.alpha}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0,1)")


@dataclass
class ContextWindow:
    left: list      # token ids from previous utterances, nearest last
    current: list
    right: list     # token ids from future utterances, nearest first

    @property
    def tokens(self):
        return self.left + self.current + self.right


def assemble_context_window(doc_utt_ids, utt_index, window):
    """Split the budget `window - N` as evenly as possible across sides.

    `doc_utt_ids` is the document as a list of per-utterance token-id lists
    (subword stream, no EOS). When one side of the document runs out of
    tokens the deficit goes to the other side; tokens are always contiguous
    and adjacent to the current utterance, never crossing the document.
    """
    current = list(doc_utt_ids[utt_index])
    n = len(current)
    if n > window:
        raise WindowError(
            f"utterance length {n} exceeds window {window}; raise the window")
    left_stream = [t for u in doc_utt_ids[:utt_index] for t in u]
    right_stream = [t for u in doc_utt_ids[utt_index + 1:] for t in u]
    budget = window - n
    want_l, want_r = budget // 2, budget - budget // 2
    if len(left_stream) < want_l:
        L = len(left_stream)
        R = min(budget - L, len(right_stream))
    elif len(right_stream) < want_r:
        R = len(right_stream)
        L = min(budget - R, len(left_stream))
    else:
        L, R = want_l, want_r
    left = left_stream[len(left_stream) - L:] if L else []
    right = right_stream[:R]
    return ContextWindow(left, current, right)


def mask_target(window: ContextWindow, i):
    """Window tokens with current position `i` (0-based) replaced by MASK."""
    n = len(window.current)
    if not 0 <= i < n:
        raise UsageError(f"mask position {i} out of range for length {n}")
    cur = list(window.current)
    cur[i] = tok.MASK
    return window.left + cur + window.right


def softmax_temperature(logits, temperature):
    """exp(z_v / T) / sum_j exp(z_j / T), max-subtracted for stability."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def topk_normalize(dist, k):
    """K largest entries renormalized to sum 1, sorted by descending
    probability; probability ties break on ascending token id."""
    if k < 1:
        raise ConfigError(f"top-K requires k >= 1, got {k}")
    dist = np.asarray(dist, dtype=np.float64)
    k = min(k, dist.shape[-1])
    order = np.lexsort((np.arange(dist.shape[-1]), -dist))[:k]
    probs = dist[order]
    probs = probs / probs.sum()
    return list(zip(order.tolist(), probs.tolist()))


# ---------------------------------------------------------------------------
# soft label precomputation
# ---------------------------------------------------------------------------

@dataclass
class SoftLabelSet:
    """Per-utterance top-K teacher distributions, one group per target
    position of the current utterance (EOS excluded)."""
    utt_key: tuple                  # (doc_id, index_in_doc)
    labels: list                    # [ [(token_id, prob), ...] per position ]
    teacher_id: str = ""
    window: int = 0
    top_k: int = 0
    temperature: float = 1.0


def params_hash(params):
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()[:16]


def _mlm_soft_labels_for_utt(teacher, window, cfg):
    n = len(window.current)
    base = np.asarray(window.tokens, dtype=np.int64)
    off = len(window.left)
    batch = np.tile(base, (n, 1))
    batch[np.arange(n), off + np.arange(n)] = tok.MASK
    logits = teacher.mlm_forward(batch).data
    out = []
    for i in range(n):
        dist = softmax_temperature(logits[i, off + i], cfg.temperature)
        out.append(topk_normalize(dist, cfg.top_k))
    return out


def _causal_soft_labels_for_utt(teacher, left_ctx, current, cfg):
    # one forward: logits at position L+i predict current[i]
    inp = np.asarray([tok.SOS] + list(left_ctx) + list(current), dtype=np.int64)
    logits = teacher.causal_forward(inp[None, :-1]).data[0]
    off = len(left_ctx)
    out = []
    for i in range(len(current)):
        dist = softmax_temperature(logits[off + i], cfg.temperature)
        out.append(topk_normalize(dist, cfg.top_k))
    return out


def precompute_soft_labels(teacher, encoded_docs, cfg: DistillConfig,
                           context="window"):
    """Run the frozen teacher over every utterance of every document.

    `encoded_docs`: list of (doc_id, [per-utterance id lists]) pairs.
    `context`: "window" uses the cross-utterance budget; "utterance"
    restricts to the current utterance. Causal teachers take left context
    only. Returns a list of SoftLabelSet in corpus order.
    """
    cfg.validate()
    teacher_id = params_hash(teacher.parameters())
    causal = teacher.cfg.mode == "causal"
    result = []
    for doc_id, utt_ids in encoded_docs:
        for idx, current in enumerate(utt_ids):
            if len(current) > cfg.window:
                raise WindowError(
                    f"utterance ({doc_id},{idx}) length {len(current)} "
                    f"exceeds window {cfg.window}")
            if causal:
                if context == "window":
                    budget = cfg.window - len(current)
                    stream = [t for u in utt_ids[:idx] for t in u]
                    left = stream[max(0, len(stream) - budget):]
                else:
                    left = []
                labels = _causal_soft_labels_for_utt(teacher, left, current, cfg)
            else:
                if context == "window":
                    win = assemble_context_window(utt_ids, idx, cfg.window)
                else:
                    win = ContextWindow([], list(current), [])
                labels = _mlm_soft_labels_for_utt(teacher, win, cfg)
            result.append(SoftLabelSet((doc_id, idx), labels, teacher_id,
                                       cfg.window, cfg.top_k, cfg.temperature))
    return result


def save_soft_labels(label_sets, path, vocab_hash):
    with open(path, "w") as f:
        if label_sets:
            first = label_sets[0]
            header = {"teacher": first.teacher_id, "window": first.window,
                      "top_k": first.top_k, "temperature": first.temperature,
                      "vocab": vocab_hash}
        else:
            header = {"vocab": vocab_hash}
        f.write(json.dumps(header) + "\n")
        for ls in label_sets:
            groups = [[[t, float(f"{p:.9g}")] for t, p in pos]
                      for pos in ls.labels]
            f.write(json.dumps({"key": list(ls.utt_key), "labels": groups}) + "\n")


def load_soft_labels(path, vocab_hash):
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("vocab") != vocab_hash:
            raise DataError(
                f"soft-label file vocabulary hash {header.get('vocab')} does "
                f"not match current vocabulary {vocab_hash}")
        out = {}
        for line in f:
            rec = json.loads(line)
            out[tuple(rec["key"])] = SoftLabelSet(
                tuple(rec["key"]),
                [[(t, p) for t, p in pos] for pos in rec["labels"]],
                header.get("teacher", ""), header.get("window", 0),
                header.get("top_k", 0), header.get("temperature", 1.0))
        return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def asr_ce_loss(logp, targets, label_smoothing=0.0, valid_mask=None):
    """Hard-label cross entropy summed over steps.

    logp: (B, N, V) log P_ASR tensor; targets: (B, N) int array; smoothing
    mass is spread uniformly over all classes. `valid_mask` (B, N) excludes
    padding positions.
    """
    targets = np.asarray(targets)
    B, N, V = logp.shape
    if targets.shape != (B, N):
        raise ShapeError(f"targets {targets.shape} vs log-probs {logp.shape}")
    q = np.zeros((B, N, V))
    rows = np.arange(B)[:, None], np.arange(N)[None, :]
    q[rows[0], rows[1], targets] = 1.0 - label_smoothing
    q += label_smoothing / V
    if valid_mask is not None:
        q *= np.asarray(valid_mask)[:, :, None]
    return -(Tensor(q) * logp).sum()


def kd_loss(logp, batch_labels):
    """Soft-label cross entropy: -sum_i sum_{(v,p)} p * log P_ASR[i, v].

    `batch_labels[b]` lists, per position of sequence b, the top-K
    (token id, probability) pairs; positions without labels contribute 0.
    """
    B, N, V = logp.shape
    bs, ns, vs, ps = [], [], [], []
    for b, labels in enumerate(batch_labels):
        if labels is None:
            continue
        for i, group in enumerate(labels):
            if group is None:
                continue
            for v, p in group:
                if not 0 <= v < V:
                    raise DataError(f"soft-label token id {v} outside vocab {V}")
                bs.append(b)
                ns.append(i)
                vs.append(v)
                ps.append(p)
    if not bs:
        return Tensor(0.0)
    picked = logp[np.array(bs), np.array(ns), np.array(vs)]
    return -(Tensor(np.array(ps)) * picked).sum()


def combined_loss(ce, kd, alpha):
    """(1 - alpha) * hard-label CE + alpha * soft-label KD."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0,1], got {alpha}")
    return ce * (1.0 - alpha) + kd * alpha
