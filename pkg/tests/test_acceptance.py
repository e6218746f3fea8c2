"""Acceptance suite: exact loss identities, gradient oracles, context and
masking invariants, decoding equivalences, exhaustive-search parity,
directional experiment outcomes, fusion comparison, and trained
bidirectionality witnesses.

The experiment-matrix fixtures are expensive (minutes); everything else is
seconds. Criteria are numbered AC1..AC8 for cross-referencing in CI logs.
"""

import itertools
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from kdasr import tokenizer as tok
from kdasr.corpus import CorpusSpec, EmissionModel, generate_corpus
from kdasr.decode_eval import (Hypothesis, beam_search, greedy_decode,
                               nbest_rescore, shallow_fusion_decode)
from kdasr.distillation import (DistillConfig, asr_ce_loss,
                                assemble_context_window, combined_loss,
                                kd_loss, precompute_soft_labels,
                                softmax_temperature, topk_normalize)
from kdasr.harness import (TABLE1_CELLS, Pipeline, TrainConfig,
                           encode_documents, median_wer, render_csv,
                           sample_mlm_masks, train_asr, train_teacher)
from kdasr.models import (Seq2SeqConfig, Seq2SeqModel, TransformerConfig,
                          TransformerLM)
from kdasr.tensor import Tensor

from _gradcheck import run_gradient_suite

REPORT_DIR = Path(__file__).resolve().parent.parent / "reports"


# ---------------------------------------------------------------------------
# AC1: loss identities by direct evaluation
# ---------------------------------------------------------------------------

def test_ac1_interpolated_loss_equals_merged_distribution_form():
    """(1-a)*CE + a*KD == cross entropy against the pointwise mixture of the
    smoothed hard distribution and the soft labels, over 100 random draws."""
    rng = np.random.default_rng(101)
    start = time.time()
    for _ in range(100):
        B, N, V = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(4, 10))
        K = int(rng.integers(1, V + 1))
        alpha = float(rng.uniform(0, 1))
        smooth = float(rng.uniform(0, 0.3))
        logits = rng.normal(size=(B, N, V)) * 2
        z = logits - logits.max(axis=-1, keepdims=True)
        logp_np = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp = Tensor(logp_np)
        targets = rng.integers(0, V, size=(B, N))
        batch_labels = []
        for b in range(B):
            per_pos = []
            for i in range(N):
                ids = rng.choice(V, size=K, replace=False)
                probs = rng.dirichlet(np.ones(K))
                per_pos.append(list(zip(ids.tolist(), probs.tolist())))
            batch_labels.append(per_pos)
        ce = asr_ce_loss(logp, targets, smooth)
        kd = kd_loss(logp, batch_labels)
        via_terms = combined_loss(ce, kd, alpha).item()

        # independent direct evaluation of the merged form
        direct = 0.0
        for b in range(B):
            for i in range(N):
                q = np.full(V, smooth / V)
                q[targets[b, i]] += 1.0 - smooth
                mixture = (1.0 - alpha) * q
                for v, p in batch_labels[b][i]:
                    mixture[v] += alpha * p
                direct -= float(mixture @ logp_np[b, i])
        assert abs(via_terms - direct) < 1e-10
    assert time.time() - start < 1.0


def test_ac1_kd_loss_equals_kl_plus_entropy_at_full_support():
    """With K = V the soft-label cross entropy equals KL(p || p_hat) + H(p)."""
    rng = np.random.default_rng(102)
    start = time.time()
    for _ in range(100):
        V = int(rng.integers(3, 12))
        p = rng.dirichlet(np.ones(V))
        logits = rng.normal(size=V) * 2
        z = logits - logits.max()
        logp_np = z - np.log(np.exp(z).sum())
        labels = [[list(zip(range(V), p.tolist()))]]
        got = kd_loss(Tensor(logp_np[None, None, :]), labels).item()
        kl = float(np.sum(p * (np.log(p) - logp_np)))
        ent = float(-np.sum(p * np.log(p)))
        assert abs(got - (kl + ent)) < 1e-9
    assert time.time() - start < 1.0


# ---------------------------------------------------------------------------
# AC2: every gradient against central finite differences
# ---------------------------------------------------------------------------

def test_ac2_full_gradient_suite_against_finite_differences():
    start = time.time()
    worst = run_gradient_suite(seed=0, n_points=10)
    elapsed = time.time() - start
    for name, err in worst.items():
        assert err <= 1e-4, f"{name}: worst relative error {err:.3e}"
    assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# AC3: top-K identity, context-window invariants, mask counts
# ---------------------------------------------------------------------------

def test_ac3_topk_renormalization_equals_restricted_softmax():
    rng = np.random.default_rng(103)
    for _ in range(200):
        V = int(rng.integers(4, 30))
        K = int(rng.integers(1, V + 1))
        T = float(rng.uniform(0.5, 4.0))
        logits = rng.normal(size=V) * 3
        got = topk_normalize(softmax_temperature(logits, T), K)
        ids = [v for v, _ in got]
        # softmax at temperature T restricted to exactly those ids
        z = logits[ids] / T
        z = z - z.max()
        restricted = np.exp(z) / np.exp(z).sum()
        for (v, p), q in zip(got, restricted):
            assert abs(p - q) < 1e-12


def test_ac3_window_invariants_over_exhaustive_corpus_scan():
    spec = CorpusSpec(n_documents=50, utterance_length_range=(2, 8),
                      alphabet_size=14, homophone_rate=0.5,
                      cross_utterance_strength=0.8,
                      utterances_per_document=(3, 10), bigram_strength=0.8)
    docs = generate_corpus(spec, seed=33)
    from kdasr.tokenizer import bpe_train
    vocab = bpe_train([u.text for d in docs for u in d.utterances], 60)
    window = 24
    for doc_id, utt_ids in encode_documents(docs, vocab):
        for idx in range(len(utt_ids)):
            win = assemble_context_window(utt_ids, idx, window)
            L, R, n = len(win.left), len(win.right), len(win.current)
            left_stream = [t for u in utt_ids[:idx] for t in u]
            right_stream = [t for u in utt_ids[idx + 1:] for t in u]
            # fills the budget up to what the document can supply
            avail = len(left_stream) + len(right_stream)
            assert L + R + n == min(window, n + avail)
            # contiguous and adjacent to the current utterance
            assert win.left == left_stream[len(left_stream) - L:]
            assert win.right == right_stream[:R]
            # balanced except when one side ran out
            if abs(L - R) > 1:
                short, got = (("right", R) if L > R else ("left", L))
                stream = right_stream if short == "right" else left_stream
                assert got == len(stream), f"unbalanced without exhausting {short}"


def test_ac3_mask_counts_for_every_length_up_to_512():
    rng = np.random.default_rng(104)
    for n in range(1, 513):
        w = np.arange(5, 5 + n)
        pos = sample_mlm_masks(w, 0.08, rng)
        assert len(pos) == int(0.08 * n)
        assert len(set(pos.tolist())) == len(pos)


# ---------------------------------------------------------------------------
# AC4: decoding and training degeneracies
# ---------------------------------------------------------------------------

def _decode_corpus_and_models():
    spec = CorpusSpec(n_documents=30, utterance_length_range=(3, 6),
                      alphabet_size=10, homophone_rate=0.4,
                      cross_utterance_strength=0.8, frame_noise_sigma=0.3,
                      frames_per_token_range=(1, 2),
                      utterances_per_document=(7, 8), frame_dim=4)
    docs = generate_corpus(spec, seed=44)
    from kdasr.tokenizer import bpe_train
    vocab = bpe_train([u.text for d in docs for u in d.utterances], 48)
    rng = np.random.default_rng(45)
    model = Seq2SeqModel(Seq2SeqConfig(vocab_size=vocab.size, frame_dim=4,
                                       enc_layers=1, enc_hidden=8,
                                       dec_hidden=8, emb_dim=6, attn_dim=6),
                         rng=rng)
    lm = TransformerLM(TransformerConfig(vocab_size=vocab.size, mode="causal",
                                         n_layers=1, d_model=8, n_heads=2,
                                         d_ff=16, max_len=64), rng=rng)
    utts = [u for d in docs for u in d.utterances]
    return utts, model, lm


def test_ac4_fusion_weight_zero_token_identical_on_200_utterances():
    utts, model, lm = _decode_corpus_and_models()
    assert len(utts) >= 200
    for u in utts[:200]:
        plain = beam_search(model, u.frames, beam_width=5, max_len=12)
        fused = shallow_fusion_decode(model, lm, u.frames, beam_width=5,
                                      lm_weight=0.0, max_len=12)
        assert [h.tokens for h in fused] == [h.tokens for h in plain]


def test_ac4_rescoring_single_hypothesis_returns_it():
    _, _, lm = _decode_corpus_and_models()
    h = Hypothesis([6, 7, tok.EOS], -2.5, finished=True)
    assert nbest_rescore([h], lm, 0.7).tokens == h.tokens


def test_ac4_beam_width_one_equals_greedy():
    utts, model, _ = _decode_corpus_and_models()
    for u in utts[:50]:
        assert beam_search(model, u.frames, beam_width=1, max_len=12)[0].tokens \
            == greedy_decode(model, u.frames, max_len=12).tokens


def test_ac4_alpha_zero_training_bit_identical_to_baseline():
    spec = CorpusSpec(n_documents=4, utterance_length_range=(2, 4),
                      alphabet_size=8, homophone_rate=0.5,
                      cross_utterance_strength=0.8, frame_noise_sigma=0.2,
                      frames_per_token_range=(1, 1),
                      utterances_per_document=(4, 6), frame_dim=4,
                      bigram_strength=0.8)
    docs = generate_corpus(spec, seed=46)
    from kdasr.tokenizer import bpe_train
    vocab = bpe_train([u.text for d in docs for u in d.utterances], 30)
    enc = encode_documents(docs, vocab)
    teacher = train_teacher(
        "mlm", enc,
        TransformerConfig(vocab_size=vocab.size, mode="mlm", n_layers=1,
                          d_model=8, n_heads=2, d_ff=16, max_len=16),
        TrainConfig(total_steps=5, batch_size=4, seed=3, learning_rate=1e-3))
    labels = {s.utt_key: s for s in precompute_soft_labels(
        teacher, enc, DistillConfig(window=16, top_k=4))}
    s2s = Seq2SeqConfig(vocab_size=vocab.size, frame_dim=4, enc_layers=1,
                        enc_hidden=6, dec_hidden=6, emb_dim=4, attn_dim=4)
    tcfg = TrainConfig(total_steps=50, batch_size=4, seed=5,
                       learning_rate=1e-3)
    traces = ([], [])
    base = train_asr(docs, vocab, None, s2s, tcfg, DistillConfig(alpha=0.0),
                     loss_hook=lambda s, l: traces[0].append(l))
    dist = train_asr(docs, vocab, labels, s2s, tcfg, DistillConfig(alpha=0.0),
                     loss_hook=lambda s, l: traces[1].append(l))
    assert traces[0] == traces[1]
    for k in base.parameters():
        assert np.array_equal(base.parameters()[k].data,
                              dist.parameters()[k].data), k


# ---------------------------------------------------------------------------
# AC5: beam search vs exhaustive enumeration on a real toy decoder
# ---------------------------------------------------------------------------

def _score_sequence(model, frames, tokens):
    """Step the decoder along `tokens` and sum its log-probabilities."""
    enc, mask = model.encode(frames[None, :, :])
    proj = model.project_encoder(enc)
    state = model.dec.initial_state(1)
    prev, total = tok.SOS, 0.0
    for t in tokens:
        logp, state, _ = model.decoder_step(enc, proj, mask, [prev], state)
        total += float(logp.data[0, t])
        prev = t
    return total


def test_ac5_beam_matches_exhaustive_search_with_and_without_fusion():
    start = time.time()
    # vocab 8 leaves five emittable symbols per step: EOS, UNK, 5, 6, 7
    candidates = [tok.EOS, tok.UNK, 5, 6, 7]
    emit = [c for c in candidates if c != tok.EOS]
    max_len, width = 3, 125
    assert width >= len(candidates) ** max_len
    rng = np.random.default_rng(55)
    model = Seq2SeqModel(Seq2SeqConfig(vocab_size=8, frame_dim=3,
                                       enc_layers=1, enc_hidden=6,
                                       dec_hidden=6, emb_dim=4, attn_dim=4),
                         rng=rng)
    lm = TransformerLM(TransformerConfig(vocab_size=8, mode="causal",
                                         n_layers=1, d_model=8, n_heads=2,
                                         d_ff=16, max_len=8), rng=rng)

    def lm_score(tokens):
        total, prefix = 0.0, [tok.SOS]
        for t in tokens:
            logits = lm.causal_forward(np.array(prefix)[None, :]).data[0, -1]
            z = logits - logits.max()
            total += float(z[t] - np.log(np.exp(z).sum()))
            prefix.append(t)
        return total

    def exhaustive(frames):
        seqs = []
        for length in range(1, max_len + 1):
            for body in itertools.product(emit, repeat=length - 1):
                lasts = [tok.EOS] if length < max_len else candidates
                for last in lasts:
                    s = list(body) + [last]
                    seqs.append((s, _score_sequence(model, frames, s)))
        return seqs

    for trial in range(3):
        frames = np.random.default_rng(60 + trial).normal(size=(4, 3))
        seqs = exhaustive(frames)
        best = min(seqs, key=lambda e: (-e[1], len(e[0]), tuple(e[0])))
        got = beam_search(model, frames, beam_width=width, max_len=max_len)
        assert got[0].tokens == best[0]
        assert abs(got[0].asr_logscore - best[1]) < 1e-10
        assert len(got) == len(seqs)  # pool enumerates everything

        w = 0.6
        fused_seqs = [(s, a + w * lm_score(s)) for s, a in seqs]
        fbest = min(fused_seqs, key=lambda e: (-e[1], len(e[0]), tuple(e[0])))
        fpool = shallow_fusion_decode(model, lm, frames, beam_width=width,
                                      lm_weight=w, max_len=max_len)
        fgot = min(fpool, key=lambda h: (-(h.asr_logscore + w * h.lm_logscore),
                                         len(h.tokens), tuple(h.tokens)))
        assert fgot.tokens == fbest[0]
        assert abs(fgot.asr_logscore + w * fgot.lm_logscore - fbest[1]) < 1e-10
    assert time.time() - start < 10.0


# ---------------------------------------------------------------------------
# AC6 + AC7: the experiment matrix (five systems x five seeds) and the
# fusion comparison. One shared run; these are the expensive tests.
# ---------------------------------------------------------------------------

SEEDS = (0, 1, 2, 3, 4)
# development-set swept over {0, 0.1, ..., 1.0} once at seed 0, then fixed;
# weights 0 through 0.3 tied on dev and the largest tied weight is kept
FUSION_LM_WEIGHT = 0.3


@pytest.fixture(scope="module")
def matrix_results():
    start = time.time()
    pipe = Pipeline("synthetic-small", corpus_seed=7)
    rows, baselines = [], {}
    for kind, context in TABLE1_CELLS:
        for seed in SEEDS:
            model = pipe.train_cell(kind, context, seed)
            wer = pipe.wer(model, "test")[0]
            rows.append({"lm": kind, "context": context or "-",
                         "seed": seed, "wer": wer})
            if kind == "none":
                baselines[seed] = model
    lm = pipe.teacher("causal")
    fusion = []
    for seed in SEEDS:
        wer = pipe.wer(baselines[seed], "test", lm=lm,
                       lm_weight=FUSION_LM_WEIGHT)[0]
        fusion.append({"lm": "none+fusion", "context": "-",
                       "seed": seed, "wer": wer})
    elapsed = time.time() - start
    REPORT_DIR.mkdir(exist_ok=True)
    (REPORT_DIR / "experiment_matrix.csv").write_text(
        render_csv(rows + fusion))
    return rows, fusion, elapsed


def _matrix_summary(rows):
    medians = {
        "baseline": median_wer(rows, "none", None),
        "mlm/win": median_wer(rows, "mlm", "window"),
        "mlm/utt": median_wer(rows, "mlm", "utterance"),
        "causal/win": median_wer(rows, "causal", "window"),
        "causal/utt": median_wer(rows, "causal", "utterance"),
    }
    return medians, " ".join(f"{k} {v:.4f}" for k, v in medians.items())


def test_ac6a_distillation_beats_baseline_by_3pct_at_the_median(matrix_results):
    rows, _, elapsed = matrix_results
    m, summary = _matrix_summary(rows)
    # distillation from the bidirectional teacher with cross-utterance
    # context beats the baseline by at least 3% relative
    assert m["mlm/win"] <= 0.97 * m["baseline"], summary
    assert elapsed < 1800.0, f"matrix took {elapsed:.0f}s"


def test_ac6b_bidirectional_teacher_at_least_as_good_as_causal(matrix_results):
    """Known to fail at this scale: with ground-truth transcripts in the
    hard-label term, soft labels act mostly as a regularizer, and the causal
    teacher's distribution — realizable by the student's autoregressive
    decoder — regularizes better than the sharper right-context-conditioned
    labels of the bidirectional teacher, whose unrealizable component behaves
    as target noise. The ordering is kept as a faithful check rather than
    weakened to fit."""
    rows, _, _ = matrix_results
    m, summary = _matrix_summary(rows)
    assert m["mlm/win"] <= m["causal/win"], summary
    assert m["mlm/utt"] <= m["causal/utt"], summary


def test_ac6c_cross_utterance_context_at_least_as_good_as_utterance_only(
        matrix_results):
    rows, _, _ = matrix_results
    m, summary = _matrix_summary(rows)
    assert m["mlm/win"] <= m["mlm/utt"], summary


def test_ac7_distilled_student_matches_shallow_fusion(matrix_results):
    rows, fusion, _ = matrix_results
    distilled = median_wer(rows, "mlm", "window")
    fused = float(np.median([r["wer"] for r in fusion]))
    assert distilled <= fused, (
        f"distilled {distilled:.4f} vs baseline+fusion {fused:.4f}")
    assert (REPORT_DIR / "experiment_matrix.csv").exists()


# ---------------------------------------------------------------------------
# AC8: trained bidirectionality and causality witnesses
# ---------------------------------------------------------------------------

def _witness_setup():
    spec = CorpusSpec(n_documents=5, utterance_length_range=(3, 5),
                      alphabet_size=8, homophone_rate=0.5,
                      cross_utterance_strength=0.8, frame_noise_sigma=0.2,
                      frames_per_token_range=(1, 1),
                      utterances_per_document=(10, 10), frame_dim=4,
                      bigram_strength=0.9)
    docs = generate_corpus(spec, seed=21)
    from kdasr.tokenizer import bpe_train
    vocab = bpe_train([u.text for d in docs for u in d.utterances], 40)
    emission = EmissionModel(spec, 21)
    homophones = {emission.symbols[i] for pair in emission.homophone_pairs
                  for i in pair}
    return docs, vocab, homophones


def test_ac8_trained_mlm_reacts_to_right_context_at_homophone():
    docs, vocab, homophones = _witness_setup()
    enc = encode_documents(docs, vocab)
    model = train_teacher(
        "mlm", enc,
        TransformerConfig(vocab_size=vocab.size, mode="mlm", n_layers=2,
                          d_model=32, n_heads=4, d_ff=64, max_len=24),
        TrainConfig(total_steps=300, batch_size=8, seed=1,
                    learning_rate=5e-3, mlm_mask_rate=0.12))
    # construct an instance: a masked homophone with at least two tokens of
    # right context inside the window
    found = 0
    for doc in docs:
        for utt in doc.utterances:
            words = utt.tokens
            ids = vocab.encode(utt.text)
            pieces = [vocab.encode(w) for w in words]
            pos = 0
            for w, piece in zip(words, pieces):
                if w in homophones and pos + len(piece) + 2 <= len(ids):
                    window = np.array(ids, dtype=np.int64)
                    window[pos] = tok.MASK
                    base = model.mlm_forward(window[None, :]).data[0, pos]
                    mutated = window.copy()
                    j = len(ids) - 1
                    mutated[j] = 5 + (mutated[j] - 5 + 1) % (vocab.size - 5)
                    out = model.mlm_forward(mutated[None, :]).data[0, pos]
                    assert not np.allclose(out, base), \
                        "masked homophone prediction ignored right context"
                    found += 1
                pos += len(piece)
            if found:
                return
    pytest.fail("no homophone instance with right context found")


def test_ac8_trained_causal_exactly_invariant_to_all_right_perturbations():
    docs, vocab, _ = _witness_setup()
    enc = encode_documents(docs, vocab)
    model = train_teacher(
        "causal", enc,
        TransformerConfig(vocab_size=vocab.size, mode="causal", n_layers=2,
                          d_model=32, n_heads=4, d_ff=64, max_len=24),
        TrainConfig(total_steps=300, batch_size=8, seed=1,
                    learning_rate=5e-3))
    ids = np.array([vocab.encode(docs[0].utterances[0].text)
                    + vocab.encode(docs[0].utterances[1].text)])
    T = ids.shape[1]
    base = model.causal_forward(ids).data
    probe = T // 2
    for j in range(probe + 1, T):
        for v in range(5, vocab.size):
            if v == ids[0, j]:
                continue
            mutated = ids.copy()
            mutated[0, j] = v
            out = model.causal_forward(mutated).data
            assert np.array_equal(out[0, :j], base[0, :j])
