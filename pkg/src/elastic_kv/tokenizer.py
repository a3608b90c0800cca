"""Byte-level tokenizer: ids 0-255 are raw bytes, then three specials."""

from __future__ import annotations

BOS = 256
EOS = 257
PAD = 258
N_SPECIAL = 3
BYTE_VOCAB = 256


def encode(text: str, bos: bool = False, eos: bool = False) -> list[int]:
    ids = list(text.encode("utf-8"))
    if bos:
        ids.insert(0, BOS)
    if eos:
        ids.append(EOS)
    return ids


def decode(ids) -> str:
    """Inverse of :func:`encode`; special and out-of-range ids are dropped."""
    return bytes(i for i in ids if 0 <= i < BYTE_VOCAB).decode("utf-8", errors="replace")
