"""Attention patterns as explicit boolean allow-matrices (row = query, column = key).

Layouts:

* causal / full-diffusion / block-causal: ``[prompt (P) | answer (L)]``
* hybrid training: ``[prompt (P) | clean answer (L) | noisy answer (L)]``
"""

from __future__ import annotations

import numpy as np


def _check(allow: np.ndarray) -> np.ndarray:
    if not allow.any(axis=1).all():
        raise AssertionError("attention mask has a query row with no allowed key")
    return allow


def causal_mask(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.tril(np.ones((n, n), dtype=bool))


def full_diffusion_mask(P: int, L: int) -> np.ndarray:
    if P < 0 or L < 1:
        raise ValueError("need P >= 0 and L >= 1")
    n = P + L
    allow = causal_mask(n)
    allow[P:, :] = True
    return _check(allow)


def _block_ids(L: int, D: int) -> np.ndarray:
    if D < 1 or L % D:
        raise ValueError(f"answer length {L} is not a multiple of block size {D}")
    return np.arange(L) // D


def block_causal_mask(P: int, L: int, D: int) -> np.ndarray:
    """Causal prompt; answer blocks see the prompt, earlier blocks and their own block."""
    blk = _block_ids(L, D)
    n = P + L
    allow = np.zeros((n, n), dtype=bool)
    allow[:P, :P] = causal_mask(P) if P else allow[:P, :P]
    allow[P:, :P] = True
    allow[P:, P:] = blk[:, None] >= blk[None, :]
    return _check(allow)


def hybrid_training_mask(P: int, L: int, D: int) -> np.ndarray:
    """Mask over ``[prompt | clean | noisy]`` used for block-diffusion training.

    Clean rows follow :func:`block_causal_mask`. A noisy row in block i sees
    the prompt, clean blocks strictly before i, and noisy keys of block i.
    """
    blk = _block_ids(L, D)
    n = P + 2 * L
    allow = np.zeros((n, n), dtype=bool)
    allow[: P + L, : P + L] = block_causal_mask(P, L, D)
    noisy = slice(P + L, n)
    allow[noisy, :P] = True
    allow[noisy, P : P + L] = blk[:, None] > blk[None, :]
    allow[noisy, noisy] = blk[:, None] == blk[None, :]
    return _check(allow)


def block_decode_mask(cache_len: int, D: int) -> np.ndarray:
    """Query block of D positions against ``[cache | block]``: everything visible."""
    return np.ones((D, cache_len + D), dtype=bool)


def hybrid_allows(P: int, L: int, D: int, q: int, k: int) -> bool:
    """Predicate form of the hybrid mask, written directly from the layout rules."""

    def region(i):
        if i < P:
            return "prompt", i
        if i < P + L:
            return "clean", (i - P) // D
        return "noisy", (i - P - L) // D

    qr, qb = region(q)
    kr, kb = region(k)
    if qr == "prompt":
        return kr == "prompt" and k <= q
    if qr == "clean":
        if kr == "prompt":
            return True
        return kr == "clean" and kb <= qb
    if kr == "prompt":
        return True
    if kr == "clean":
        return kb < qb
    return kb == qb


def render(allow: np.ndarray) -> str:
    """Text grid with '#' for allowed and '.' for blocked entries."""
    return "\n".join("".join("#" if v else "." for v in row) for row in allow)


def build(kind: str, P: int, L: int, D: int = 1) -> np.ndarray:
    if kind == "causal":
        return causal_mask(P + L)
    if kind == "full":
        return full_diffusion_mask(P, L)
    if kind == "block":
        return block_causal_mask(P, L, D)
    if kind == "hybrid":
        return hybrid_training_mask(P, L, D)
    raise ValueError(f"unknown mask kind {kind!r}")
