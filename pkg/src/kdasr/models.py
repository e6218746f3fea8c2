"""The three networks: attention seq2seq ASR student, bidirectional MLM
teacher, and causal transformer LM teacher.

All models are parameter dictionaries of `Tensor`s plus pure forward
functions built on the autodiff ops, so one `backward()` call covers any
of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError, Tensor, concat, embedding_lookup, layer_norm, log_softmax,
    matmul, relu, reshape, sigmoid, softmax, tanh, tensor_sum, transpose,
)
from . import tokenizer as tok

NEG_INF = -1e9


def _glorot(rng, shape):
    fan_in, fan_out = shape[0], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# LSTM building block
# ---------------------------------------------------------------------------

class LSTMCell:
    def __init__(self, params, prefix, input_dim, hidden, rng=None):
        self.prefix = prefix
        self.hidden = hidden
        if rng is not None:
            params[prefix + ".W"] = _glorot(rng, (input_dim + hidden, 4 * hidden))
            b = np.zeros(4 * hidden)
            b[hidden:2 * hidden] = 1.0  # forget-gate bias
            params[prefix + ".b"] = Tensor(b, requires_grad=True)
        self.W = params[prefix + ".W"]
        self.b = params[prefix + ".b"]

    def step(self, x, state):
        """x: (B, D_in); state: (h, c) each (B, H)."""
        h_prev, c_prev = state
        z = matmul(concat([x, h_prev], axis=1), self.W) + self.b
        H = self.hidden
        i = sigmoid(z[:, 0:H])
        f = sigmoid(z[:, H:2 * H])
        g = tanh(z[:, 2 * H:3 * H])
        o = sigmoid(z[:, 3 * H:4 * H])
        c = f * c_prev + i * g
        h = o * tanh(c)
        return h, c

    def initial_state(self, batch):
        return (Tensor(np.zeros((batch, self.hidden))),
                Tensor(np.zeros((batch, self.hidden))))


def _run_lstm(cell, xs):
    """xs: (B, T, D) tensor; returns (B, T, H)."""
    B, T, _ = xs.shape
    h, c = cell.initial_state(B)
    outs = []
    for t in range(T):
        h, c = cell.step(xs[:, t, :], (h, c))
        outs.append(reshape(h, (B, 1, cell.hidden)))
    return concat(outs, axis=1)


def _reverse_padded(xs, lengths):
    """Reverse each sequence within its valid length; padding stays at the end."""
    B, T = xs.shape[0], xs.shape[1]
    idx = np.tile(np.arange(T), (B, 1))
    for b, n in enumerate(lengths):
        idx[b, :n] = np.arange(n - 1, -1, -1)
    return xs[np.arange(B)[:, None], idx]


# ---------------------------------------------------------------------------
# Attention-based encoder-decoder student
# ---------------------------------------------------------------------------

@dataclass
class Seq2SeqConfig:
    vocab_size: int
    frame_dim: int
    enc_layers: int = 2
    enc_hidden: int = 64
    dec_hidden: int = 64
    emb_dim: int = 32
    attn_dim: int = 32


class Seq2SeqModel:
    """Bi-LSTM encoder + single LSTM decoder with additive attention."""

    def __init__(self, cfg: Seq2SeqConfig, rng=None, params=None):
        self.cfg = cfg
        self.params = {} if params is None else params
        p = self.params
        init = rng is not None
        d_in = cfg.frame_dim
        self.enc_fwd, self.enc_bwd = [], []
        for layer in range(cfg.enc_layers):
            self.enc_fwd.append(LSTMCell(p, f"enc{layer}.fwd", d_in, cfg.enc_hidden,
                                         rng if init else None))
            self.enc_bwd.append(LSTMCell(p, f"enc{layer}.bwd", d_in, cfg.enc_hidden,
                                         rng if init else None))
            d_in = 2 * cfg.enc_hidden
        self.dec = LSTMCell(p, "dec", cfg.emb_dim, cfg.dec_hidden,
                            rng if init else None)
        if init:
            p["embed"] = _glorot(rng, (cfg.vocab_size, cfg.emb_dim))
            p["attn.Wh"] = _glorot(rng, (cfg.dec_hidden, cfg.attn_dim))
            p["attn.Ws"] = _glorot(rng, (2 * cfg.enc_hidden, cfg.attn_dim))
            p["attn.v"] = _glorot(rng, (cfg.attn_dim, 1))
            p["out.W"] = _glorot(rng, (cfg.dec_hidden + 2 * cfg.enc_hidden,
                                       cfg.vocab_size))
            p["out.b"] = _zeros((cfg.vocab_size,))

    def parameters(self):
        return self.params

    def encode(self, frames, lengths=None):
        """frames: (B, T, frame_dim) array or Tensor -> states (B, T, 2H), mask."""
        xs = frames if isinstance(frames, Tensor) else Tensor(frames)
        if xs.ndim != 3 or xs.shape[2] != self.cfg.frame_dim:
            raise ShapeError(
                f"encode expects (B, T, {self.cfg.frame_dim}), got {xs.shape}")
        B, T = xs.shape[0], xs.shape[1]
        if T == 0:
            raise ShapeError("encode requires at least one frame")
        if lengths is None:
            lengths = [T] * B
        for fwd, bwd in zip(self.enc_fwd, self.enc_bwd):
            out_f = _run_lstm(fwd, xs)
            out_b = _reverse_padded(_run_lstm(bwd, _reverse_padded(xs, lengths)),
                                    lengths)
            xs = concat([out_f, out_b], axis=2)
        mask = np.zeros((B, T))
        for b, n in enumerate(lengths):
            mask[b, n:] = NEG_INF
        return xs, mask

    def _attend(self, h, enc_states, enc_proj, mask):
        """h: (B, H); enc_states: (B, T, 2H); returns (context, weights)."""
        p = self.params
        q = matmul(h, p["attn.Wh"])  # (B, A)
        B, T = enc_states.shape[0], enc_states.shape[1]
        e = tanh(enc_proj + reshape(q, (B, 1, self.cfg.attn_dim)))
        scores = reshape(matmul(e, p["attn.v"]), (B, T)) + Tensor(mask)
        w = softmax(scores, axis=1)
        ctx = reshape(matmul(reshape(w, (B, 1, T)), enc_states),
                      (B, enc_states.shape[2]))
        return ctx, w

    def decoder_step(self, enc_states, enc_proj, mask, prev_tokens, state):
        """One decoding step; returns (log-probs (B, V), new state, attn weights)."""
        p = self.params
        emb = embedding_lookup(p["embed"], np.asarray(prev_tokens))
        h, c = self.dec.step(emb, state)
        ctx, w = self._attend(h, enc_states, enc_proj, mask)
        logits = matmul(concat([h, ctx], axis=1), p["out.W"]) + p["out.b"]
        return log_softmax(logits, axis=1), (h, c), w

    def project_encoder(self, enc_states):
        """Precompute W_s·s for every encoder position (reused each step)."""
        return matmul(enc_states, self.params["attn.Ws"])

    def teacher_forced_logprobs(self, frames, lengths, targets):
        """targets: (B, N) padded gold ids. Returns log P_ASR of shape (B, N, V);
        step i conditions on SOS + targets[:, :i]."""
        enc_states, mask = self.encode(frames, lengths)
        enc_proj = self.project_encoder(enc_states)
        B, N = targets.shape
        state = self.dec.initial_state(B)
        prev = np.full(B, tok.SOS, dtype=np.int64)
        steps = []
        for i in range(N):
            logp, state, _ = self.decoder_step(enc_states, enc_proj, mask,
                                               prev, state)
            steps.append(reshape(logp, (B, 1, self.cfg.vocab_size)))
            prev = targets[:, i]
        return concat(steps, axis=1)


# ---------------------------------------------------------------------------
# Transformer LM (MLM or causal)
# ---------------------------------------------------------------------------

@dataclass
class TransformerConfig:
    vocab_size: int
    mode: str               # "mlm" or "causal"
    n_layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 256

    def __post_init__(self):
        if self.mode not in ("mlm", "causal"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must divide evenly into heads")


class TransformerLM:
    def __init__(self, cfg: TransformerConfig, rng=None, params=None):
        self.cfg = cfg
        self.params = {} if params is None else params
        p = self.params
        if rng is not None:
            d = cfg.d_model
            p["embed"] = _glorot(rng, (cfg.vocab_size, d))
            # sinusoidal init (still trained): gives attention a usable
            # relative-position signal from step one
            pos = np.arange(cfg.max_len)[:, None]
            dim = np.arange(d)[None, :]
            angle = pos / np.power(10000.0, (2 * (dim // 2)) / d)
            pe = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
            p["pos"] = Tensor(0.5 * pe, requires_grad=True)
            for l in range(cfg.n_layers):
                p[f"blk{l}.ln1.g"] = Tensor(np.ones(d), requires_grad=True)
                p[f"blk{l}.ln1.b"] = _zeros((d,))
                p[f"blk{l}.qkv"] = _glorot(rng, (d, 3 * d))
                p[f"blk{l}.proj"] = _glorot(rng, (d, d))
                p[f"blk{l}.ln2.g"] = Tensor(np.ones(d), requires_grad=True)
                p[f"blk{l}.ln2.b"] = _zeros((d,))
                p[f"blk{l}.ff1"] = _glorot(rng, (d, cfg.d_ff))
                p[f"blk{l}.ff1b"] = _zeros((cfg.d_ff,))
                p[f"blk{l}.ff2"] = _glorot(rng, (cfg.d_ff, d))
                p[f"blk{l}.ff2b"] = _zeros((d,))
            p["ln_f.g"] = Tensor(np.ones(d), requires_grad=True)
            p["ln_f.b"] = _zeros((d,))
            p["out.W"] = _glorot(rng, (d, cfg.vocab_size))
            p["out.b"] = _zeros((cfg.vocab_size,))

    def parameters(self):
        return self.params

    def _attention_mask(self, ids):
        B, T = ids.shape
        mask = np.zeros((B, 1, T, T))
        if self.cfg.mode == "causal":
            mask += np.triu(np.full((T, T), NEG_INF), k=1)
        pad = ids == tok.PAD
        if pad.any():
            mask = mask + np.where(pad, NEG_INF, 0.0)[:, None, None, :]
        return mask

    def forward(self, ids):
        """ids: (B, T) int array -> logits (B, T, V).

        MLM mode attends everywhere; causal mode output at position i is
        the next-token prediction for position i+1 (attends to <= i).
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, T = ids.shape
        cfg = self.cfg
        if T > cfg.max_len:
            raise ShapeError(
                f"sequence length {T} exceeds positional window {cfg.max_len}")
        p = self.params
        x = embedding_lookup(p["embed"], ids) + p["pos"][0:T]
        mask = self._attention_mask(ids)
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        scale = 1.0 / np.sqrt(dh)
        for l in range(cfg.n_layers):
            xn = layer_norm(x, p[f"blk{l}.ln1.g"], p[f"blk{l}.ln1.b"])
            qkv = matmul(xn, p[f"blk{l}.qkv"])  # (B, T, 3d)
            qkv = transpose(reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
            q, k, v = qkv[0], qkv[1], qkv[2]     # each (B, H, T, dh)
            scores = matmul(q, transpose(k, (0, 1, 3, 2))) * scale
            scores = scores + Tensor(mask)
            attn = softmax(scores, axis=-1)
            heads = matmul(attn, v)              # (B, H, T, dh)
            merged = reshape(transpose(heads, (0, 2, 1, 3)), (B, T, cfg.d_model))
            x = x + matmul(merged, p[f"blk{l}.proj"])
            xn = layer_norm(x, p[f"blk{l}.ln2.g"], p[f"blk{l}.ln2.b"])
            ff = matmul(relu(matmul(xn, p[f"blk{l}.ff1"]) + p[f"blk{l}.ff1b"]),
                        p[f"blk{l}.ff2"]) + p[f"blk{l}.ff2b"]
            x = x + ff
        x = layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        return matmul(x, p["out.W"]) + p["out.b"]

    def mlm_forward(self, ids):
        if self.cfg.mode != "mlm":
            raise ShapeError("mlm_forward requires a bidirectional model")
        return self.forward(ids)

    def causal_forward(self, ids):
        if self.cfg.mode != "causal":
            raise ShapeError("causal_forward requires a causal model")
        return self.forward(ids)

    def sequence_logprob(self, ids):
        """Causal log P(ids) with SOS prefix; ids must contain no PAD."""
        inp = np.concatenate([[tok.SOS], np.asarray(ids[:-1])])
        logits = self.causal_forward(inp[None, :])
        logp = log_softmax(logits, axis=-1).data[0]
        return float(sum(logp[i, t] for i, t in enumerate(ids)))

    def pseudo_logprob(self, ids):
        """MLM pseudo-log-likelihood: sum over positions of log P(token when
        that single position is masked)."""
        ids = np.asarray(ids, dtype=np.int64)
        n = len(ids)
        if n == 0:
            return 0.0
        batch = np.tile(ids, (n, 1))
        np.fill_diagonal(batch, tok.MASK)
        logp = log_softmax(self.mlm_forward(batch), axis=-1).data
        return float(sum(logp[i, i, ids[i]] for i in range(n)))


# ---------------------------------------------------------------------------
# checkpoint archive
# ---------------------------------------------------------------------------

def save_params(params, path):
    np.savez(path, **{k: v.data for k, v in params.items()})


def load_params(path):
    with np.load(path) as f:
        return {k: Tensor(f[k], requires_grad=True) for k in f.files}
