"""Desk-scale vision-language model toolkit."""

from ._tlvm import (
    Model,
    TlvmError,
    check_budget,
    closed_accuracy,
    decode,
    encode,
    evaluate_echo,
    normalize_answer,
    open_recall,
    version,
    write_corpus,
)

__version__ = version()

__all__ = [
    "Model",
    "TlvmError",
    "check_budget",
    "closed_accuracy",
    "decode",
    "encode",
    "evaluate_echo",
    "normalize_answer",
    "open_recall",
    "version",
    "write_corpus",
]
