"""Distillation memorization audit toolkit."""

from distaudit._core import (
    BOS,
    EOS,
    PAD,
    SEP,
    VOCAB_SIZE,
    audit,
    decode,
    encode,
    exact_match,
    generate,
    lcs_length,
    load_jsonl,
    param_count,
    render_prompt,
    rouge_l,
    rouge_n,
    rouge_report,
    rouge_tokenize,
    run_experiment,
    save_jsonl,
    synth_corpus,
    train_run,
)

__all__ = [
    "BOS",
    "EOS",
    "PAD",
    "SEP",
    "VOCAB_SIZE",
    "audit",
    "decode",
    "encode",
    "exact_match",
    "generate",
    "lcs_length",
    "load_jsonl",
    "param_count",
    "render_prompt",
    "rouge_l",
    "rouge_n",
    "rouge_report",
    "rouge_tokenize",
    "run_experiment",
    "save_jsonl",
    "synth_corpus",
    "train_run",
]
