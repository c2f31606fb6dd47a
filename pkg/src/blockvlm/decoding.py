"""Block decoding with KV-cache reuse and low-confidence remasking.

A prompt (grid embeddings followed by text) is prefilled into the cache.
Each answer block starts fully masked and is denoised over several forward
passes that attend to ``[cache | block]``; every pass decides some of the
still-masked slots (the most confident ones). A decided block is committed
with one clean forward whose keys/values are appended to the cache.
Generation stops after the first block that contains EOS once fully decided.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import masks
from . import tensor as T
from .data import Tokenizer
from .model import KVCache, Parameters, embed_prompt, forward


@dataclass(frozen=True)
class Static:
    """Decode a fixed number of slots per step so the block finishes in ``steps`` passes."""

    steps: int

    def __str__(self):
        return f"static:{self.steps}"


@dataclass(frozen=True)
class Dynamic:
    """Decode every slot whose confidence exceeds ``threshold`` (at least one per pass)."""

    threshold: float

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("dynamic threshold must lie in [0, 1]")

    def __str__(self):
        return f"dynamic:{self.threshold:g}"


def parse_strategy(text: str):
    kind, _, value = text.partition(":")
    try:
        if kind == "static":
            return Static(int(value))
        if kind == "dynamic":
            return Dynamic(float(value))
    except ValueError as exc:
        raise ValueError(f"bad strategy {text!r}: {exc}") from None
    raise ValueError(f"bad strategy {text!r}; expected static:S or dynamic:TAU")


def validate_strategy(strategy, D: int) -> None:
    if isinstance(strategy, Static):
        if not 1 <= strategy.steps <= D:
            raise ValueError(f"static steps must be in [1, {D}]")
    elif not isinstance(strategy, Dynamic):
        raise TypeError(f"unknown strategy {strategy!r}")


def static_schedule(D: int, S: int) -> list[int]:
    """Per-step decode counts: the first D mod S steps take ceil(D/S), the rest floor(D/S)."""
    if not 1 <= S <= D:
        raise ValueError(f"steps must be in [1, {D}]")
    q, r = divmod(D, S)
    return [q + 1] * r + [q] * (S - r)


def confidence(logits_row) -> tuple[int, float]:
    """Greedy token and its softmax probability."""
    row = np.asarray(logits_row, dtype=np.float64)
    p = np.exp(row - row.max())
    p /= p.sum()
    best = int(np.argmax(p))
    return best, float(p[best])


def _confidences(logits: np.ndarray):
    z = logits.astype(np.float64)
    p = np.exp(z - z.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    best = p.argmax(axis=-1)
    return best, p[np.arange(len(best)), best], p


@dataclass
class StepEvent:
    block: int
    step: int
    positions: list
    confidences: list
    tokens: list

    def format(self) -> str:
        conf = ",".join(f"{c:.4f}" for c in self.confidences)
        return (f"block={self.block} step={self.step} positions={self.positions} "
                f"tokens={self.tokens} confidences=[{conf}]")


@dataclass
class DecodeStats:
    tokens_generated: int = 0
    denoise_forwards: int = 0
    commit_forwards: int = 0
    per_step_decode_counts: list = field(default_factory=list)
    wall_time: float = 0.0
    blocks: int = 0

    @property
    def parallelism(self) -> float:
        return self.tokens_generated / self.denoise_forwards if self.denoise_forwards else 0.0

    @property
    def forwards_per_token(self) -> float:
        total = self.denoise_forwards + self.commit_forwards
        return total / self.tokens_generated if self.tokens_generated else 0.0

    def merge(self, other: "DecodeStats") -> None:
        self.tokens_generated += other.tokens_generated
        self.denoise_forwards += other.denoise_forwards
        self.commit_forwards += other.commit_forwards
        self.per_step_decode_counts.extend(other.per_step_decode_counts)
        self.wall_time += other.wall_time
        self.blocks += other.blocks

    def line(self) -> str:
        return (f"stats tokens={self.tokens_generated} blocks={self.blocks} "
                f"denoise_forwards={self.denoise_forwards} commit_forwards={self.commit_forwards} "
                f"parallelism={self.parallelism:.4f} forwards_per_token={self.forwards_per_token:.4f} "
                f"wall_time={self.wall_time:.6f}")


def denoise_with(logits_fn: Callable[[np.ndarray], np.ndarray], D: int, strategy, mask_id: int,
                 block_index: int = 0, temperature: float = 0.0, rng=None):
    """Iteratively unmask one block given a function mapping block tokens to (D, V) logits."""
    validate_strategy(strategy, D)
    tokens = np.full(D, mask_id, dtype=np.int64)
    decided = np.zeros(D, dtype=bool)
    schedule = static_schedule(D, strategy.steps) if isinstance(strategy, Static) else None
    trace = []
    step = 0
    while not decided.all():
        logits = np.array(logits_fn(tokens), dtype=np.float64)
        logits[:, mask_id] = T.NEG_INF_SURROGATE
        if temperature > 0:
            best, _, probs = _confidences(logits / temperature)
            rng = np.random.default_rng(rng)
            best = np.array([rng.choice(len(p), p=p) for p in probs])
            score = probs[np.arange(D), best]
        else:
            best, score, _ = _confidences(logits)
        undecided = np.flatnonzero(~decided)
        # stable sort: ties go to the lowest position
        order = undecided[np.argsort(-score[undecided], kind="stable")]
        if schedule is not None:
            picks = order[: schedule[step]]
        else:
            picks = order[score[order] > strategy.threshold]
            if picks.size == 0:
                picks = order[:1]
        picks = np.sort(picks)
        tokens[picks] = best[picks]
        decided[picks] = True
        trace.append(StepEvent(block_index, step, picks.tolist(), score[picks].tolist(), tokens[picks].tolist()))
        step += 1
    return tokens, trace


def prefill(params: Parameters, image, prompt_ids) -> KVCache:
    """Cache K/V of ``[grid embeddings ; prompt tokens]`` under causal attention."""
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    if prompt_ids.size == 0:
        raise ValueError("prompt must not be empty")
    with T.no_grad():
        x = embed_prompt(params, image, prompt_ids)
        n = x.shape[-2]
        if n > params.config.max_positions:
            raise ValueError("prompt exceeds the position budget")
        out = forward(params, x, np.arange(n), masks.causal_mask(n))
    return KVCache.empty(params.config).append(out.kv)


def _block_forward(params: Parameters, cache: KVCache, tokens: np.ndarray):
    D = len(tokens)
    if cache.length + D > params.config.max_positions:
        raise ValueError("block would overflow the position budget")
    positions = cache.length + np.arange(D)
    with T.no_grad():
        return forward(params, tokens, positions, masks.block_decode_mask(cache.length, D), cache)


def denoise_block(params: Parameters, cache: KVCache, strategy, block_index: int = 0, block_size: int | None = None,
                  temperature: float = 0.0, rng=None):
    """Decode one block on top of ``cache``; returns (tokens, trace)."""
    D = block_size or params.config.block_size
    return denoise_with(lambda toks: _block_forward(params, cache, toks).logits.data, D, strategy,
                        params.config.mask_id, block_index, temperature, rng)


def commit_block(params: Parameters, cache: KVCache, tokens) -> KVCache:
    """One clean forward of the decided block; its K/V are appended to a new cache."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if np.any(tokens == params.config.mask_id):
        raise ValueError("cannot commit a block that still holds MASK slots")
    return cache.append(_block_forward(params, cache, tokens).kv)


class DecodeSession:
    """Single-stream state machine: prefill, then alternate denoise and commit."""

    def __init__(self, params: Parameters, image, prompt_ids, block_size: int | None = None):
        self.params = params
        self.block_size = block_size or params.config.block_size
        self.cache = prefill(params, image, prompt_ids)
        self.prompt_len = self.cache.length
        self.pending = None
        self.blocks: list[np.ndarray] = []
        self.stats = DecodeStats()

    def denoise(self, strategy, temperature: float = 0.0, rng=None):
        if self.pending is not None:
            raise RuntimeError("previous block has not been committed")
        tokens, trace = denoise_block(self.params, self.cache, strategy, len(self.blocks), self.block_size,
                                      temperature, rng)
        self.pending = tokens
        self.stats.denoise_forwards += len(trace)
        self.stats.per_step_decode_counts.extend(len(e.positions) for e in trace)
        self.stats.tokens_generated += len(tokens)
        self.stats.blocks += 1
        return tokens, trace

    def commit(self):
        if self.pending is None:
            raise RuntimeError("no decoded block waiting to be committed")
        self.cache = commit_block(self.params, self.cache, self.pending)
        self.stats.commit_forwards += 1
        self.blocks.append(self.pending)
        self.pending = None


@dataclass
class GenerationResult:
    text: str
    tokens: list
    stats: DecodeStats
    truncated: bool
    trace: list = field(default_factory=list)


def _finish(params, tokens, stats, truncated, trace, tokenizer) -> GenerationResult:
    eos = params.config.eos_id
    tokens = [int(t) for t in tokens]
    cut = tokens.index(eos) if eos in tokens else len(tokens)
    tokenizer = tokenizer or Tokenizer(vocab_size=params.config.vocab_size)
    text = tokenizer.detokenize(tokens[:cut], strict=False)
    return GenerationResult(text, tokens, stats, truncated, trace)


def _prompt_ids(params, prompt, tokenizer):
    if isinstance(prompt, str):
        tokenizer = tokenizer or Tokenizer(vocab_size=params.config.vocab_size)
        return [tokenizer.bos_id] + tokenizer.tokenize(prompt)
    return list(prompt)


def generate(params: Parameters, image, prompt, strategy=None, max_blocks: int = 16, tokenizer=None,
             on_step: Callable[[StepEvent], None] | None = None, temperature: float = 0.0,
             rng=None) -> GenerationResult:
    """Block-decode until a fully decided block contains EOS (or ``max_blocks``)."""
    if max_blocks < 1:
        raise ValueError("max_blocks must be >= 1")
    D = params.config.block_size
    strategy = strategy or Static(D)
    start = time.perf_counter()
    session = DecodeSession(params, image, _prompt_ids(params, prompt, tokenizer))
    trace, out = [], []
    truncated = True
    for _ in range(max_blocks):
        tokens, events = session.denoise(strategy, temperature, rng)
        for e in events:
            if on_step:
                on_step(e)
        trace.extend(events)
        session.commit()
        out.extend(tokens.tolist())
        if params.config.eos_id in tokens:
            truncated = False
            break
    session.stats.wall_time = time.perf_counter() - start
    return _finish(params, out, session.stats, truncated, trace, tokenizer)


def generate_reference(params: Parameters, image, prompt, strategy=None, max_blocks: int = 16,
                       tokenizer=None) -> GenerationResult:
    """Same decoding loop without a cache: every pass recomputes the whole sequence."""
    D = params.config.block_size
    strategy = strategy or Static(D)
    prompt_ids = np.asarray(_prompt_ids(params, prompt, tokenizer), dtype=np.int64)
    with T.no_grad():
        prompt_x = embed_prompt(params, image, prompt_ids)
    P = prompt_x.shape[-2]
    stats = DecodeStats()
    out: list[int] = []
    trace = []
    truncated = True
    start = time.perf_counter()
    for b in range(max_blocks):
        def logits_fn(block_tokens):
            answer = np.asarray(out + block_tokens.tolist(), dtype=np.int64)
            L = len(answer)
            with T.no_grad():
                x = T.concat([prompt_x, T.embedding(params["tok_emb"], answer)], axis=0)
                res = forward(params, x, np.arange(P + L), masks.block_causal_mask(P, L, D))
            return res.logits.data[-D:]

        tokens, events = denoise_with(logits_fn, D, strategy, params.config.mask_id, b)
        trace.extend(events)
        stats.denoise_forwards += len(events)
        stats.per_step_decode_counts.extend(len(e.positions) for e in events)
        stats.tokens_generated += D
        stats.blocks += 1
        out.extend(tokens.tolist())
        if params.config.eos_id in tokens:
            truncated = False
            break
    stats.wall_time = time.perf_counter() - start
    return _finish(params, out, stats, truncated, trace, tokenizer)


def generate_ar(params: Parameters, image, prompt, max_tokens: int = 128, tokenizer=None) -> GenerationResult:
    """Greedy next-token decoding with a KV cache (the autoregressive baseline)."""
    start = time.perf_counter()
    prompt_ids = np.asarray(_prompt_ids(params, prompt, tokenizer), dtype=np.int64)
    mask_id, eos = params.config.mask_id, params.config.eos_id
    with T.no_grad():
        x = embed_prompt(params, image, prompt_ids)
        n = x.shape[-2]
        res = forward(params, x, np.arange(n), masks.causal_mask(n))
        cache = KVCache.empty(params.config).append(res.kv)
        logits = res.logits.data[-1].copy()
        out: list[int] = []
        stats = DecodeStats()
        truncated = True
        while len(out) < max_tokens:
            logits[mask_id] = T.NEG_INF_SURROGATE
            tok = int(np.argmax(logits))
            out.append(tok)
            stats.tokens_generated += 1
            stats.denoise_forwards += 1
            stats.per_step_decode_counts.append(1)
            if tok == eos:
                truncated = False
                break
            if cache.length + 1 > params.config.max_positions:
                break
            res = forward(params, np.asarray([tok]), np.asarray([cache.length]),
                          masks.block_decode_mask(cache.length, 1), cache)
            cache = cache.append(res.kv)
            logits = res.logits.data[-1].copy()
    stats.wall_time = time.perf_counter() - start
    return _finish(params, out, stats, truncated, [], tokenizer)


def forwards_per_token(strategy, D: int) -> float:
    """Denoise plus commit passes per generated token for a static schedule."""
    if isinstance(strategy, Static):
        return (strategy.steps + 1) / D
    return math.nan
