"""Autoregressive, full-diffusion and block-diffusion training losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import masks
from . import tensor as T
from .data import Sample, Tokenizer
from .model import Parameters, embed_prompt, embed_tokens, forward
from .noising import T_MIN, BlockPlan, NoisySample, pad_to_block_multiple, sample_block_noise


@dataclass
class Batch:
    """Equal-shape examples: optional grids, prompt ids and block-padded answers."""

    images: np.ndarray | None
    prompt_ids: np.ndarray
    answers: np.ndarray
    block_size: int

    def __post_init__(self):
        if self.answers.shape[1] % self.block_size:
            raise ValueError("answers must be padded to a block multiple before batching")

    def __len__(self):
        return self.answers.shape[0]

    @property
    def prompt_len(self) -> int:
        n_img = 0 if self.images is None else self.images.shape[1]
        return n_img + self.prompt_ids.shape[1]

    @property
    def plan(self) -> BlockPlan:
        return BlockPlan(self.prompt_len, self.answers.shape[1], self.block_size)

    def subset(self, idx) -> "Batch":
        return Batch(None if self.images is None else self.images[idx], self.prompt_ids[idx], self.answers[idx],
                     self.block_size)


def prompt_ids_for(tokenizer: Tokenizer, prompt: str) -> list[int]:
    return [tokenizer.bos_id] + tokenizer.tokenize(prompt)


def answer_ids_for(tokenizer: Tokenizer, caption: str) -> list[int]:
    return tokenizer.tokenize(caption) + [tokenizer.eos_id]


def make_batch(samples: list[Sample], tokenizer: Tokenizer, block_size: int, with_image: bool = True) -> Batch:
    """Tokenize and pad every answer with EOS up to a shared block multiple."""
    prompts = [prompt_ids_for(tokenizer, s.prompt) for s in samples]
    if len({len(p) for p in prompts}) != 1:
        raise ValueError("all prompts in a batch must have the same length")
    answers = [pad_to_block_multiple(answer_ids_for(tokenizer, s.caption), block_size, tokenizer.eos_id)
               for s in samples]
    width = max(len(a) for a in answers)
    answers = [a + [tokenizer.eos_id] * (width - len(a)) for a in answers]
    images = np.stack([s.image.as_array() for s in samples]) if with_image else None
    return Batch(images, np.asarray(prompts, dtype=np.int64), np.asarray(answers, dtype=np.int64), block_size)


def _reduce(logits: T.Tensor, targets, weights, active, normalize: str) -> T.Tensor:
    loss = T.weighted_masked_ce(logits, targets, weights, active)
    if normalize == "sum":
        loss = loss * float(max(1, int(np.count_nonzero(active))))
    elif normalize != "mean":
        raise ValueError(f"unknown normalization {normalize!r}")
    return loss


def ar_loss(params: Parameters, batch: Batch, normalize: str = "mean") -> T.Tensor:
    """Next-token cross-entropy over answer positions under a causal mask."""
    B, L = batch.answers.shape
    if L == 0:
        raise ValueError("answer length must be positive")
    P = batch.prompt_len
    x = T.concat([embed_prompt(params, batch.images, batch.prompt_ids), embed_tokens(params, batch.answers)], axis=1)
    out = forward(params, x, np.arange(P + L), masks.causal_mask(P + L))
    # logits at P-1+i predict answer token i
    logits = out.logits[:, P - 1 : P + L - 1, :].reshape(B * L, -1)
    active = np.ones(B * L, dtype=bool)
    return _reduce(logits, batch.answers.reshape(-1), np.ones(B * L), active, normalize)


def corrupt(batch: Batch, rng: np.random.Generator, block_size: int, t=None, t_min: float = T_MIN,
            mask_id: int = 2) -> list[NoisySample]:
    plan = BlockPlan(batch.prompt_len, batch.answers.shape[1], block_size)
    return [sample_block_noise(a, plan, rng, t_min=t_min, mask_id=mask_id, t=t) for a in batch.answers]


def _stack(noisy: list[NoisySample]):
    xt = np.stack([n.xt for n in noisy])
    masked = np.concatenate([n.masked for n in noisy])
    weight = np.concatenate([n.weight for n in noisy])
    return xt, masked, weight


def full_diffusion_loss(params: Parameters, batch: Batch, rng: np.random.Generator, t=None,
                        t_min: float = T_MIN, normalize: str = "mean", noisy=None) -> T.Tensor:
    """Whole-answer masking with one t per sequence, weight 1/t, bidirectional answer attention."""
    B, L = batch.answers.shape
    P = batch.prompt_len
    noisy = noisy or corrupt(batch, rng, L, t=t, t_min=t_min, mask_id=params.config.mask_id)
    xt, masked, weight = _stack(noisy)
    x = T.concat([embed_prompt(params, batch.images, batch.prompt_ids), embed_tokens(params, xt)], axis=1)
    out = forward(params, x, np.arange(P + L), masks.full_diffusion_mask(P, L))
    logits = out.logits[:, P:, :].reshape(B * L, -1)
    return _reduce(logits, batch.answers.reshape(-1), weight, masked, normalize)


def block_diffusion_loss(params: Parameters, batch: Batch, rng: np.random.Generator, t=None,
                         t_min: float = T_MIN, normalize: str = "mean", block_size: int | None = None,
                         noisy=None) -> T.Tensor:
    """Block-wise masked CE read from the noisy copy of ``[prompt | clean | noisy]``."""
    D = block_size or batch.block_size
    B, L = batch.answers.shape
    P = batch.prompt_len
    noisy = noisy or corrupt(batch, rng, D, t=t, t_min=t_min, mask_id=params.config.mask_id)
    xt, masked, weight = _stack(noisy)
    x = T.concat([
        embed_prompt(params, batch.images, batch.prompt_ids),
        embed_tokens(params, batch.answers),
        embed_tokens(params, xt),
    ], axis=1)
    positions = np.concatenate([np.arange(P + L), P + np.arange(L)])
    out = forward(params, x, positions, masks.hybrid_training_mask(P, L, D))
    logits = out.logits[:, P + L :, :].reshape(B * L, -1)
    return _reduce(logits, batch.answers.reshape(-1), weight, masked, normalize)


OBJECTIVES = {
    "ar": lambda params, batch, rng: ar_loss(params, batch),
    "full_diffusion": full_diffusion_loss,
    "block_diffusion": block_diffusion_loss,
}
