"""Knowledge distillation from masked-language-model teachers into an
attention-based seq2seq ASR student, with fusion/rescoring baselines, on a
synthetic desk-scale corpus."""

__version__ = "0.1.0"
