"""Command-line entry points for the pipeline stages."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tokenizer as tok
from .corpus import CorpusSpec, generate_corpus, load_corpus, save_corpus, \
    split_documents
from .distillation import DistillConfig, precompute_soft_labels, \
    save_soft_labels, load_soft_labels
from .harness import ExperimentMatrix, Pipeline, TrainConfig, \
    encode_documents, evaluate_wer, preset, render_csv, render_table1, \
    run_matrix, train_asr, train_teacher
from .models import Seq2SeqConfig, Seq2SeqModel, TransformerConfig, \
    TransformerLM, load_params, save_params


def _log(msg):
    print(msg, file=sys.stderr)


def _load_spec(path):
    with open(path) as f:
        return CorpusSpec.from_dict(json.load(f))


def _load_vocab_and_docs(args):
    vocab = tok.Vocabulary.load(args.vocab)
    docs = load_corpus(args.corpus)
    return vocab, docs


def main(argv=None):
    ap = argparse.ArgumentParser(prog="kdasr")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    p.add_argument("--spec", required=True, help="JSON corpus spec file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-bpe", help="train the BPE vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain-teacher")
    p.add_argument("--kind", choices=["mlm", "causal"], required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--window", type=int, default=48)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--mask-rate", type=float, default=0.35)
    p.add_argument("--seed", type=int, default=100)
    p.add_argument("--out", required=True)

    p = sub.add_parser("distill-labels")
    p.add_argument("--kind", choices=["mlm", "causal"], required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--context", choices=["window", "utterance"],
                   default="window")
    p.add_argument("--window", type=int, default=40)
    p.add_argument("--top-k", type=int, default=8)
    p.add_argument("--temperature", type=float, default=2.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-asr")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("decode")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--beam-width", type=int, default=5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--beam-width", type=int, default=5)

    p = sub.add_parser("run-matrix")
    p.add_argument("--preset", default="synthetic-small")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--out", required=True)

    p = sub.add_parser("report")
    p.add_argument("--csv", required=True)

    args = ap.parse_args(argv)
    return COMMANDS[args.cmd](args)


def cmd_gen_corpus(args):
    spec = _load_spec(args.spec)
    docs = generate_corpus(spec, args.seed)
    save_corpus(docs, args.out)
    _log(f"wrote {sum(len(d) for d in docs)} utterances to {args.out}")


def cmd_train_bpe(args):
    docs = load_corpus(args.corpus)
    vocab = tok.bpe_train([u.text for d in docs for u in d.utterances],
                          args.vocab_size)
    vocab.save(args.out)
    _log(f"vocabulary of {vocab.size} tokens -> {args.out}")


def cmd_pretrain_teacher(args):
    vocab, docs = _load_vocab_and_docs(args)
    enc = encode_documents(docs, vocab)
    mcfg = TransformerConfig(vocab_size=vocab.size, mode=args.kind,
                             n_layers=2, d_model=args.d_model, n_heads=4,
                             d_ff=args.d_ff, max_len=args.window)
    tcfg = TrainConfig(total_steps=args.steps, batch_size=16, seed=args.seed,
                       learning_rate=args.lr, mlm_mask_rate=args.mask_rate)
    model = train_teacher(args.kind, enc, mcfg, tcfg, log=_log)
    save_params(model.parameters(), args.out)


def _load_teacher(path, kind, vocab, window):
    params = load_params(path)
    d = params["embed"].shape[1]
    n_layers = len({k.split(".")[0] for k in params if k.startswith("blk")})
    mcfg = TransformerConfig(vocab_size=vocab.size, mode=kind,
                             n_layers=n_layers, d_model=d, n_heads=4,
                             d_ff=params["blk0.ff1"].shape[1],
                             max_len=params["pos"].shape[0])
    return TransformerLM(mcfg, params=params)


def cmd_distill_labels(args):
    vocab, docs = _load_vocab_and_docs(args)
    teacher = _load_teacher(args.teacher, args.kind, vocab, args.window)
    enc = encode_documents(docs, vocab)
    dcfg = DistillConfig(window=args.window, top_k=args.top_k,
                         temperature=args.temperature)
    sets = precompute_soft_labels(teacher, enc, dcfg, context=args.context)
    save_soft_labels(sets, args.out, vocab.content_hash())
    _log(f"{len(sets)} soft-label records -> {args.out}")


def cmd_train_asr(args):
    vocab, docs = _load_vocab_and_docs(args)
    labels = (load_soft_labels(args.labels, vocab.content_hash())
              if args.labels else None)
    mcfg = Seq2SeqConfig(vocab_size=vocab.size,
                         frame_dim=docs[0].utterances[0].frames.shape[1],
                         enc_layers=1, enc_hidden=48, dec_hidden=48,
                         emb_dim=24, attn_dim=24)
    tcfg = TrainConfig(total_steps=args.steps, batch_size=16, seed=args.seed,
                       learning_rate=args.lr, asr_lr_decay=True)
    dcfg = DistillConfig(alpha=args.alpha)
    model = train_asr(docs, vocab, labels, mcfg, tcfg, dcfg, log=_log)
    save_params(model.parameters(), args.out)


def _load_student(path, vocab, frame_dim):
    params = load_params(path)
    enc_layers = len({k.split(".")[0] for k in params if k.startswith("enc")})
    hidden = params["dec.b"].shape[0] // 4
    mcfg = Seq2SeqConfig(vocab_size=vocab.size, frame_dim=frame_dim,
                         enc_layers=enc_layers,
                         enc_hidden=params["enc0.fwd.b"].shape[0] // 4,
                         dec_hidden=hidden,
                         emb_dim=params["embed"].shape[1],
                         attn_dim=params["attn.v"].shape[0])
    return Seq2SeqModel(mcfg, params=params)


def cmd_decode(args):
    from .decode_eval import beam_search
    vocab, docs = _load_vocab_and_docs(args)
    model = _load_student(args.model, vocab, docs[0].utterances[0].frames.shape[1])
    with open(args.out, "w") as f:
        for doc in docs:
            for utt in doc.utterances:
                hyps = beam_search(model, utt.frames, args.beam_width)
                for rank, h in enumerate(hyps[:args.beam_width]):
                    f.write(json.dumps({
                        "utt": [utt.doc_id, utt.index_in_doc], "rank": rank,
                        "asr_logscore": h.asr_logscore,
                        "lm_logscore": h.lm_logscore,
                        "text": vocab.decode(h.tokens)}) + "\n")
    _log(f"decodes -> {args.out}")


def cmd_evaluate(args):
    vocab, docs = _load_vocab_and_docs(args)
    model = _load_student(args.model, vocab, docs[0].utterances[0].frames.shape[1])
    wer, s, i, d, nref = evaluate_wer(model, docs, vocab,
                                      beam_width=args.beam_width)
    print(f"WER {100 * wer:.2f}%  S={s} I={i} D={d} ref={nref}")


def cmd_run_matrix(args):
    matrix = ExperimentMatrix(seeds=tuple(args.seeds),
                              preset_name=args.preset)
    rows, report = run_matrix(matrix, log=_log, out_csv=args.out)
    print(render_table1(rows))


def cmd_report(args):
    import csv as csvmod
    with open(args.csv) as f:
        rows = [dict(r) for r in csvmod.DictReader(f)]
    for r in rows:
        r["wer"] = float(r["wer"])
    print(render_table1(rows))


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-bpe": cmd_train_bpe,
    "pretrain-teacher": cmd_pretrain_teacher,
    "distill-labels": cmd_distill_labels,
    "train-asr": cmd_train_asr,
    "decode": cmd_decode,
    "evaluate": cmd_evaluate,
    "run-matrix": cmd_run_matrix,
    "report": cmd_report,
}


if __name__ == "__main__":
    main()
