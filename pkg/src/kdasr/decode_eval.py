"""Beam-search inference, shallow fusion, n-best rescoring, and error-rate
evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tokenizer as tok
from .tensor import UsageError, log_softmax


@dataclass
class Hypothesis:
    tokens: list                    # token ids, EOS-terminated iff finished
    asr_logscore: float = 0.0
    lm_logscore: float = None
    finished: bool = False
    state: tuple = field(default=None, repr=False, compare=False)

    def sort_key(self, lm_weight=0.0):
        score = self.asr_logscore
        if lm_weight and self.lm_logscore is not None:
            score += lm_weight * self.lm_logscore
        # higher score first, then shorter, then lexicographic tokens
        return (-score, len(self.tokens), tuple(self.tokens))

    @property
    def content_tokens(self):
        return [t for t in self.tokens if t != tok.EOS]


def beam_search(model, frames, beam_width=5, max_len=32):
    """Standard beam search over the student's per-step log-probabilities.

    Returns the pool of finished (or length-capped) hypotheses sorted by
    descending ASR log-score with deterministic tie-breaking.
    """
    return _beam_search(model, frames, beam_width, max_len,
                        lm=None, lm_weight=0.0)


def shallow_fusion_decode(model, lm, frames, beam_width=5, lm_weight=0.3,
                          max_len=32):
    """Beam search scoring candidates by log P_ASR + lm_weight * log P_LM."""
    if lm_weight < 0:
        raise UsageError(f"lm_weight must be >= 0, got {lm_weight}")
    return _beam_search(model, frames, beam_width, max_len,
                        lm=lm, lm_weight=lm_weight)


def _lm_step_logprobs(lm, prefix_tokens):
    """Next-token log-probs of the causal LM given [SOS] + prefix."""
    inp = np.array([tok.SOS] + list(prefix_tokens), dtype=np.int64)
    logits = lm.causal_forward(inp[None, :]).data[0, -1]
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def _beam_search(model, frames, beam_width, max_len, lm, lm_weight):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise UsageError(f"expected nonempty (T, D) frames, got {frames.shape}")
    if beam_width < 1:
        raise UsageError(f"beam_width must be >= 1, got {beam_width}")
    enc_states, mask = model.encode(frames[None, :, :])
    enc_proj = model.project_encoder(enc_states)
    init = model.dec.initial_state(1)
    use_lm = lm is not None and lm_weight > 0
    beam = [Hypothesis([], 0.0, 0.0 if use_lm else None, state=init)]
    pool = []
    for _ in range(max_len):
        candidates = []
        for hyp in beam:
            prev = hyp.tokens[-1] if hyp.tokens else tok.SOS
            logp, state, _ = model.decoder_step(enc_states, enc_proj, mask,
                                                [prev], hyp.state)
            logp = logp.data[0]
            lm_logp = _lm_step_logprobs(lm, hyp.tokens) if use_lm else None
            step_scores = logp + lm_weight * lm_logp if use_lm else logp
            # +3 margin: PAD/SOS/MASK are filtered out below
            top = np.argsort(-step_scores, kind="stable")[:beam_width + 3]
            for v in top:
                v = int(v)
                if v in (tok.PAD, tok.SOS, tok.MASK):
                    continue
                cand = Hypothesis(
                    hyp.tokens + [v],
                    hyp.asr_logscore + float(logp[v]),
                    (hyp.lm_logscore + float(lm_logp[v])) if use_lm else None,
                    finished=(v == tok.EOS),
                    state=state)
                candidates.append(cand)
        candidates.sort(key=lambda h: h.sort_key(lm_weight))
        beam = []
        for cand in candidates:
            if cand.finished:
                pool.append(cand)
            else:
                beam.append(cand)
            if len(beam) >= beam_width:
                break
        if not beam:
            break
    pool.extend(beam)  # length-capped, unfinished
    pool.sort(key=lambda h: h.sort_key(0.0))
    return pool


def greedy_decode(model, frames, max_len=32):
    return beam_search(model, frames, beam_width=1, max_len=max_len)[0]


def nbest_rescore(hyps, lm, lm_weight):
    """Best hypothesis under asr_logscore + lm_weight * LM score.

    Causal LMs contribute log-likelihood; MLM teachers contribute the
    pseudo-log-likelihood (each token scored with that position masked).
    """
    if not hyps:
        raise UsageError("nbest_rescore requires a nonempty hypothesis list")
    scored = []
    for h in hyps:
        content = h.content_tokens
        if lm_weight == 0:
            lm_score = 0.0
        elif lm.cfg.mode == "causal":
            lm_score = lm.sequence_logprob(content + [tok.EOS])
        else:
            lm_score = lm.pseudo_logprob(content)
        scored.append(Hypothesis(h.tokens, h.asr_logscore, lm_score,
                                 h.finished))
    scored.sort(key=lambda h: h.sort_key(lm_weight))
    return scored[0]


# ---------------------------------------------------------------------------
# word error rate
# ---------------------------------------------------------------------------

def word_error_rate(hyp_words, ref_words):
    """Levenshtein alignment with unit costs.

    Returns (wer, substitutions, insertions, deletions) where
    wer = (S + I + D) / len(ref).
    """
    if isinstance(hyp_words, str):
        hyp_words = hyp_words.split()
    if isinstance(ref_words, str):
        ref_words = ref_words.split()
    if not ref_words:
        raise UsageError("reference must be nonempty")
    n, m = len(ref_words), len(hyp_words)
    # dp[i][j] = (cost, S, I, D) aligning ref[:i] to hyp[:j]
    dp = [[None] * (m + 1) for _ in range(n + 1)]
    dp[0][0] = (0, 0, 0, 0)
    for j in range(1, m + 1):
        c = dp[0][j - 1]
        dp[0][j] = (c[0] + 1, c[1], c[2] + 1, c[3])
    for i in range(1, n + 1):
        c = dp[i - 1][0]
        dp[i][0] = (c[0] + 1, c[1], c[2], c[3] + 1)
        for j in range(1, m + 1):
            if ref_words[i - 1] == hyp_words[j - 1]:
                best = dp[i - 1][j - 1]
            else:
                sub = dp[i - 1][j - 1]
                ins = dp[i][j - 1]
                dele = dp[i - 1][j]
                best3 = min(sub[0], ins[0], dele[0])
                if sub[0] == best3:
                    best = (sub[0] + 1, sub[1] + 1, sub[2], sub[3])
                elif dele[0] == best3:
                    best = (dele[0] + 1, dele[1], dele[2], dele[3] + 1)
                else:
                    best = (ins[0] + 1, ins[1], ins[2] + 1, ins[3])
            dp[i][j] = best
    cost, s, ins, dele = dp[n][m]
    return cost / n, s, ins, dele


def corpus_wer(pairs):
    """Aggregate WER over (hyp_text, ref_text) pairs."""
    errors = s_tot = i_tot = d_tot = ref_tot = 0
    for hyp, ref in pairs:
        ref_words = ref.split()
        _, s, i, d = word_error_rate(hyp, ref)
        errors += s + i + d
        s_tot += s
        i_tot += i
        d_tot += d
        ref_tot += len(ref_words)
    wer = errors / ref_tot if ref_tot else 0.0
    return wer, s_tot, i_tot, d_tot, ref_tot
