"""Model contracts: shapes, normalization, causality/bidirectionality
witnesses, direct-summation likelihood oracle, and small overfit runs."""

import numpy as np
import pytest

from kdasr import tokenizer as tok
from kdasr.corpus import CorpusSpec, generate_corpus
from kdasr.harness import TrainConfig, encode_documents, mlm_accuracy, \
    pack_sequences, train_teacher
from kdasr.models import Seq2SeqConfig, Seq2SeqModel, TransformerConfig, \
    TransformerLM, load_params, save_params
from kdasr.tensor import ShapeError


def student(seed=0, **kw):
    cfg = Seq2SeqConfig(vocab_size=9, frame_dim=3, enc_layers=1,
                        enc_hidden=4, dec_hidden=4, emb_dim=3, attn_dim=4,
                        **kw)
    return Seq2SeqModel(cfg, rng=np.random.default_rng(seed))


def lm(mode, seed=0, **kw):
    base = dict(vocab_size=9, mode=mode, n_layers=2, d_model=8, n_heads=2,
                d_ff=16, max_len=12)
    base.update(kw)
    return TransformerLM(TransformerConfig(**base),
                        rng=np.random.default_rng(seed))


# -- student ----------------------------------------------------------------

def test_encode_single_frame_shape():
    m = student()
    states, mask = m.encode(np.ones((1, 1, 3)))
    assert states.shape == (1, 1, 8)
    assert mask.shape == (1, 1) and mask[0, 0] == 0.0


def test_encode_rejects_wrong_frame_dim():
    with pytest.raises(ShapeError):
        student().encode(np.ones((1, 4, 5)))
    with pytest.raises(ShapeError):
        student().encode(np.ones((1, 0, 3)))


def test_encode_is_order_sensitive():
    m = student()
    rng = np.random.default_rng(1)
    frames = rng.normal(size=(1, 5, 3))
    a, _ = m.encode(frames)
    b, _ = m.encode(frames[:, ::-1, :])
    assert not np.allclose(a.data, b.data)


def test_decoder_step_distribution_sums_to_one():
    m = student()
    frames = np.random.default_rng(2).normal(size=(2, 4, 3))
    enc, mask = m.encode(frames)
    proj = m.project_encoder(enc)
    logp, state, w = m.decoder_step(enc, proj, mask, [tok.SOS, tok.SOS],
                                    m.dec.initial_state(2))
    assert np.allclose(np.exp(logp.data).sum(axis=1), 1.0, atol=1e-6)
    assert np.allclose(w.data.sum(axis=1), 1.0, atol=1e-6)


def test_attention_single_state_weight_is_one():
    m = student()
    frames = np.random.default_rng(3).normal(size=(1, 1, 3))
    enc, mask = m.encode(frames)
    proj = m.project_encoder(enc)
    _, _, w = m.decoder_step(enc, proj, mask, [tok.SOS],
                             m.dec.initial_state(1))
    assert np.allclose(w.data, [[1.0]])


def test_attention_ignores_padded_positions():
    m = student()
    frames = np.random.default_rng(4).normal(size=(1, 6, 3))
    enc, mask = m.encode(frames, lengths=[4])
    proj = m.project_encoder(enc)
    _, _, w = m.decoder_step(enc, proj, mask, [tok.SOS],
                             m.dec.initial_state(1))
    assert np.all(w.data[0, 4:] < 1e-12)


def test_teacher_forced_equals_direct_summation():
    m = student()
    rng = np.random.default_rng(5)
    frames = rng.normal(size=(1, 5, 3))
    targets = np.array([[6, 7, 5, tok.EOS]])
    logp = m.teacher_forced_logprobs(frames, [5], targets).data
    total = sum(logp[0, i, targets[0, i]] for i in range(4))

    # direct evaluation: step the decoder by hand and sum log probabilities
    enc, mask = m.encode(frames, [5])
    proj = m.project_encoder(enc)
    state = m.dec.initial_state(1)
    prev = [tok.SOS]
    direct = 0.0
    for i in range(4):
        step_logp, state, _ = m.decoder_step(enc, proj, mask, prev, state)
        direct += step_logp.data[0, targets[0, i]]
        prev = [targets[0, i]]
    assert abs(total - direct) < 1e-10


# -- transformer teachers ---------------------------------------------------

def test_causal_invariant_to_future_positions():
    m = lm("causal")
    rng = np.random.default_rng(6)
    ids = rng.integers(5, 9, size=(1, 8))
    base = m.causal_forward(ids).data
    for j in range(3, 8):
        mutated = ids.copy()
        mutated[0, j] = 5 + (mutated[0, j] - 5 + 1) % 4
        out = m.causal_forward(mutated).data
        assert np.array_equal(out[0, :j], base[0, :j])
        assert not np.allclose(out[0, j:], base[0, j:])


def test_mlm_sensitive_to_right_context():
    m = lm("mlm")
    ids = np.array([[5, tok.MASK, 6, 7, 8]])
    base = m.mlm_forward(ids).data[0, 1]
    mutated = ids.copy()
    mutated[0, 3] = 5
    assert not np.allclose(m.mlm_forward(mutated).data[0, 1], base)


def test_mode_guards():
    with pytest.raises(ShapeError):
        lm("causal").mlm_forward(np.array([[5, 6]]))
    with pytest.raises(ShapeError):
        lm("mlm").causal_forward(np.array([[5, 6]]))
    with pytest.raises(ValueError):
        TransformerConfig(vocab_size=9, mode="prefix")
    with pytest.raises(ValueError):
        TransformerConfig(vocab_size=9, mode="mlm", d_model=10, n_heads=4)


def test_length_beyond_positional_window_rejected():
    with pytest.raises(ShapeError):
        lm("mlm").forward(np.zeros((1, 13), dtype=np.int64))


def test_pad_positions_do_not_influence_others():
    m = lm("mlm")
    with_pad = np.array([[5, 6, 7, tok.PAD, tok.PAD]])
    longer = np.array([[5, 6, 7, 8, 8]])
    a = m.mlm_forward(with_pad).data[0, :3]
    b = m.mlm_forward(longer).data[0, :3]
    assert not np.allclose(a, b)  # sanity: inputs actually differ
    trunc = m.mlm_forward(np.array([[5, 6, 7]])).data[0]
    assert np.allclose(a, trunc, atol=1e-10)


def test_sequence_logprob_matches_manual_sum():
    m = lm("causal")
    ids = [5, 6, 7, tok.EOS]
    from kdasr.tensor import log_softmax
    inp = np.array([[tok.SOS, 5, 6, 7]])
    logp = log_softmax(m.causal_forward(inp), axis=-1).data[0]
    manual = sum(logp[i, t] for i, t in enumerate(ids))
    assert abs(m.sequence_logprob(ids) - manual) < 1e-10


def test_pseudo_logprob_masks_one_position_at_a_time():
    m = lm("mlm")
    ids = np.array([5, 6, 7])
    from kdasr.tensor import log_softmax
    total = 0.0
    for i in range(3):
        masked = ids.copy()
        masked[i] = tok.MASK
        logp = log_softmax(m.mlm_forward(masked[None, :]), axis=-1).data[0]
        total += logp[i, ids[i]]
    assert abs(m.pseudo_logprob(ids) - total) < 1e-10
    assert m.pseudo_logprob(np.array([], dtype=np.int64)) == 0.0


def test_save_load_round_trip(tmp_path):
    m = lm("mlm", seed=9)
    path = tmp_path / "lm.npz"
    save_params(m.parameters(), path)
    loaded = TransformerLM(m.cfg, params=load_params(path))
    ids = np.array([[5, tok.MASK, 7]])
    assert np.array_equal(loaded.mlm_forward(ids).data,
                          m.mlm_forward(ids).data)


# -- overfit runs (trained-model witnesses) ---------------------------------

def _tiny_training_setup():
    spec = CorpusSpec(n_documents=5, utterance_length_range=(3, 5),
                      alphabet_size=8, homophone_rate=0.5,
                      cross_utterance_strength=0.8, frame_noise_sigma=0.2,
                      frames_per_token_range=(1, 1),
                      utterances_per_document=(10, 10), frame_dim=4,
                      bigram_strength=0.9)
    docs = generate_corpus(spec, seed=21)  # 50 utterances
    from kdasr.tokenizer import bpe_train
    vocab = bpe_train([u.text for d in docs for u in d.utterances], 40)
    return docs, encode_documents(docs, vocab), vocab


def test_mlm_overfits_small_corpus():
    _, enc, vocab = _tiny_training_setup()
    mcfg = TransformerConfig(vocab_size=vocab.size, mode="mlm", n_layers=2,
                             d_model=32, n_heads=4, d_ff=64, max_len=24)
    tcfg = TrainConfig(total_steps=600, batch_size=8, seed=1,
                       learning_rate=5e-3, mlm_mask_rate=0.12)
    model = train_teacher("mlm", enc, mcfg, tcfg)
    acc = mlm_accuracy(model, enc, rate=0.12, seed=2)
    assert acc >= 0.95, f"masked-token accuracy {acc:.3f} below 0.95"


def test_causal_overfits_small_corpus():
    _, enc, vocab = _tiny_training_setup()
    mcfg = TransformerConfig(vocab_size=vocab.size, mode="causal", n_layers=2,
                             d_model=32, n_heads=4, d_ff=64, max_len=24)
    tcfg = TrainConfig(total_steps=600, batch_size=8, seed=1,
                       learning_rate=5e-3)
    model = train_teacher("causal", enc, mcfg, tcfg)
    # next-token prediction is ambiguous at the start of a window even
    # when memorized, so the bar applies to positions with real context
    windows = pack_sequences(enc, 24)
    hit = total = 0
    for w in windows:
        inputs = np.concatenate([[tok.SOS], w[:-1]])
        pred = model.causal_forward(inputs[None, :]).data[0].argmax(axis=-1)
        valid = w != tok.PAD
        valid[:4] = False
        hit += int((pred[valid] == w[valid]).sum())
        total += int(valid.sum())
    acc = hit / total
    assert acc >= 0.95, f"next-token accuracy {acc:.3f} below 0.95"


def test_trained_mlm_bidirectionality_witness():
    _, enc, vocab = _tiny_training_setup()
    mcfg = TransformerConfig(vocab_size=vocab.size, mode="mlm", n_layers=1,
                             d_model=16, n_heads=2, d_ff=32, max_len=24)
    tcfg = TrainConfig(total_steps=150, batch_size=8, seed=1,
                       learning_rate=5e-3, mlm_mask_rate=0.12)
    model = train_teacher("mlm", enc, mcfg, tcfg)
    w = pack_sequences(enc, 24)[0].copy()
    w[3] = tok.MASK
    base = model.mlm_forward(w[None, :]).data[0, 3]
    mutated = w.copy()
    mutated[7] = (mutated[7] - 5 + 1) % (vocab.size - 5) + 5
    out = model.mlm_forward(mutated[None, :]).data[0, 3]
    assert not np.allclose(out, base)
