"""Block partitioning, EOS padding and block-uniform masking noise."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

T_MIN = 1e-3


@dataclass(frozen=True)
class BlockPlan:
    prompt_len: int
    answer_len: int
    block_size: int

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.answer_len < self.block_size or self.answer_len % self.block_size:
            raise ValueError(f"answer length {self.answer_len} is not a positive multiple of {self.block_size}")

    @property
    def n_blocks(self) -> int:
        return self.answer_len // self.block_size


@dataclass
class NoisySample:
    x0: np.ndarray
    xt: np.ndarray
    t: np.ndarray
    masked: np.ndarray
    weight: np.ndarray

    @property
    def masked_positions(self) -> set:
        return set(np.flatnonzero(self.masked).tolist())


def pad_to_block_multiple(answer, D: int, eos_id: int) -> list[int]:
    """Append EOS until the length is a multiple of D; an empty answer becomes one EOS block."""
    if D < 1:
        raise ValueError("block size must be >= 1")
    answer = list(answer)
    if not answer:
        logger.info("empty answer padded to a single EOS block")
        return [eos_id] * D
    return answer + [eos_id] * (-len(answer) % D)


def loss_weight(t, schedule: str = "linear", t_min: float = T_MIN):
    """Positive diffusion loss scale |alpha_t'| / (1 - alpha_t).

    For the linear schedule alpha_t = 1 - t this is 1/t, capped at 1/t_min.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr <= 0):
        raise ValueError("noise level t must be > 0")
    if schedule != "linear":
        raise ValueError(f"unsupported schedule {schedule!r}")
    w = np.minimum(1.0 / t_arr, 1.0 / t_min)
    return float(w) if w.ndim == 0 else w


def sample_t(rng: np.random.Generator, n: int, t_min: float = T_MIN) -> np.ndarray:
    """n draws from Uniform(t_min, 1]."""
    if not 0 < t_min < 1:
        raise ValueError("t_min must lie in (0, 1)")
    return t_min + (1.0 - t_min) * (1.0 - rng.random(n))


def sample_block_noise(x0, plan: BlockPlan, rng: np.random.Generator, t_min: float = T_MIN,
                       mask_id: int = 2, t=None) -> NoisySample:
    """Corrupt an answer block-wise: block i gets its own t_i and masks each slot with prob t_i.

    ``t`` forces the noise levels (scalar or one value per block). The RNG is
    consumed as: one uniform per block for t (skipped when forced), then one
    uniform per position.
    """
    x0 = np.asarray(x0, dtype=np.int64)
    if x0.shape != (plan.answer_len,):
        raise ValueError(f"answer length {x0.shape} does not match plan {plan.answer_len}")
    nb, D = plan.n_blocks, plan.block_size
    if t is None:
        t_blocks = sample_t(rng, nb, t_min)
    else:
        t_blocks = np.broadcast_to(np.asarray(t, dtype=np.float64), (nb,)).copy()
        if np.any(t_blocks <= 0) or np.any(t_blocks > 1):
            raise ValueError("forced t must lie in (0, 1]")
    per_pos = np.repeat(t_blocks, D)
    masked = rng.random(plan.answer_len) < per_pos
    masked &= x0 != mask_id
    xt = np.where(masked, mask_id, x0)
    weight = np.where(masked, loss_weight(per_pos, t_min=t_min), 0.0)
    return NoisySample(x0, xt, t_blocks, masked, weight)
