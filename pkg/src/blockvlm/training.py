"""Staged training: connector alignment, AR / full-diffusion / block-diffusion finetuning."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Sample, Tokenizer, gen_dataset, load_dataset, train_val_split
from .model import ModelConfig, Parameters, init_params, load_checkpoint, save_checkpoint
from .objectives import ar_loss, block_diffusion_loss, full_diffusion_loss, make_batch
from .noising import T_MIN

logger = logging.getLogger(__name__)

STAGES = {
    # stage: (objective, trainable subset, uses image)
    "PretrainTextAR": ("ar", "all", False),
    "ConnectorAR": ("ar", "connector", True),
    "FinetuneAR": ("ar", "all", True),
    "FinetuneFullDiff": ("full_diffusion", "all", True),
    "FinetuneBlockDiff": ("block_diffusion", "all", True),
}


class TrainingError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass
class TrainConfig:
    stage: str = "FinetuneBlockDiff"
    trainable: str | None = None
    lr: float | None = None
    steps: int = 200
    batch: int = 16
    seed: int = 0
    block_size: int | None = None
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.95)
    grad_clip: float = 1.0
    warmup: int = 20
    lr_schedule: str = "cosine"
    t_min: float = T_MIN

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; choose from {sorted(STAGES)}")
        expected = STAGES[self.stage][1]
        if self.trainable is None:
            self.trainable = expected
        if self.trainable != expected:
            raise ValueError(f"stage {self.stage} requires trainable set {expected!r}")
        if self.lr is None:
            self.lr = 3e-4 if self.stage in ("ConnectorAR", "PretrainTextAR") else 1e-4
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be positive")

    @property
    def objective(self) -> str:
        return STAGES[self.stage][0]

    @property
    def with_image(self) -> bool:
        return STAGES[self.stage][2]


@dataclass
class RunRecord:
    stage: str
    losses: list = field(default_factory=list)
    checkpoint: str | None = None
    metrics: dict = field(default_factory=dict)

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            for i, loss in enumerate(self.losses):
                writer.writerow([i, repr(float(loss))])


class AdamW:
    """Adam with decoupled weight decay (applied to matrices only)."""

    def __init__(self, names, shapes, lr, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.01):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = {n: np.zeros(s, np.float32) for n, s in zip(names, shapes)}
        self.v = {n: np.zeros(s, np.float32) for n, s in zip(names, shapes)}
        self.t = 0

    def step(self, arrays: dict, grads: dict, lr: float) -> dict:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        out = {}
        for n, g in grads.items():
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            w = arrays[n]
            if w.ndim >= 2 and self.weight_decay:
                w = w * (1 - lr * self.weight_decay)
            out[n] = (w - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(np.float32)
        return out


def _lr_at(config: TrainConfig, step: int) -> float:
    if step < config.warmup:
        return config.lr * (step + 1) / config.warmup
    if config.lr_schedule == "constant":
        return config.lr
    progress = (step - config.warmup) / max(1, config.steps - config.warmup)
    return config.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * progress)))


def stage_loss(params: Parameters, config: TrainConfig, batch, rng):
    if config.objective == "ar":
        return ar_loss(params, batch)
    if config.objective == "full_diffusion":
        return full_diffusion_loss(params, batch, rng, t_min=config.t_min)
    return block_diffusion_loss(params, batch, rng, t_min=config.t_min)


def gradient_audit(params: Parameters, names, config: TrainConfig, batch, rng) -> T.Gradients:
    """One backward; nonzero gradients must exist, and only for ``names``."""
    tracked = params.with_grad(names)
    grads = T.backward(stage_loss(tracked, config, batch, rng))
    allowed = set(names)
    for tensor, g in grads.items():
        if tensor.name not in allowed and np.any(g):
            raise TrainingError(f"gradient reached tensor {tensor.name!r} outside the trainable set")
    if not any(np.any(g) for _, g in grads.items()):
        raise TrainingError("no gradient reached the trainable set")
    return grads


def train_stage(params: Parameters, config: TrainConfig, dataset: list[Sample],
                tokenizer: Tokenizer | None = None) -> tuple[Parameters, RunRecord]:
    """Run one stage; returns updated parameters and the per-step loss record."""
    if not dataset:
        raise ValueError("dataset is empty")
    tokenizer = tokenizer or Tokenizer(vocab_size=params.config.vocab_size)
    if config.block_size and config.block_size != params.config.block_size:
        params = Parameters(dataclasses.replace(params.config, block_size=config.block_size), params.tensors,
                            params.frozen)
    D = params.config.block_size
    names = params.trainable(config.trainable)
    order_rng = np.random.default_rng([config.seed, 0])
    noise_rng = np.random.default_rng([config.seed, 1])
    batch_size = min(config.batch, len(dataset))

    def batches():
        while True:
            perm = order_rng.permutation(len(dataset))
            for lo in range(0, len(perm) - batch_size + 1, batch_size):
                yield make_batch([dataset[i] for i in perm[lo : lo + batch_size]], tokenizer, D, config.with_image)

    stream = batches()
    gradient_audit(params, names, config, make_batch(dataset[:batch_size], tokenizer, D, config.with_image),
                   np.random.default_rng([config.seed, 2]))
    opt = AdamW(names, [params[n].shape for n in names], config.lr, config.betas,
                weight_decay=config.weight_decay)
    record = RunRecord(config.stage)
    for step in range(config.steps):
        tracked = params.with_grad(names)
        try:
            loss = stage_loss(tracked, config, next(stream), noise_rng)
        except FloatingPointError as exc:
            raise TrainingError(f"non-finite value in forward: {exc}", step) from None
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError("non-finite loss", step)
        grads = T.backward(loss)
        g = {n: grads[tracked[n]] for n in names}
        norm = math.sqrt(sum(float((a.astype(np.float64) ** 2).sum()) for a in g.values()))
        if not math.isfinite(norm):
            raise TrainingError("non-finite gradient", step)
        if config.grad_clip and norm > config.grad_clip:
            g = {n: a * np.float32(config.grad_clip / norm) for n, a in g.items()}
        params = params.replace(opt.step(params.arrays(), g, _lr_at(config, step)))
        record.losses.append(value)
        if step % 50 == 0 or step == config.steps - 1:
            logger.info("%s step %d loss %.4f", config.stage, step, value)
    return params, record


# ---------------------------------------------------------------- pipelines


@dataclass
class RunConfig:
    """Flat settings for ``blockvlm train``; serialized as ``key = value`` lines."""

    pipeline: str = "from_ar_lm"
    stage: str = "FinetuneBlockDiff"
    out_dir: str = "runs/default"
    base_checkpoint: str = ""
    dataset: str = ""
    n_samples: int = 2000
    grid: int = 3
    colors: int = 4
    data_seed: int = 0
    val_fraction: float = 0.1
    seed: int = 0
    vocab_size: int = 64
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_vis: int = 32
    max_positions: int = 512
    block_size: int = 8
    block_sizes: str = ""
    batch: int = 16
    steps: int = 1000
    lr: float = 1e-4
    connector_steps: int = 300
    connector_lr: float = 3e-4
    pretrain_steps: int = 500
    pretrain_lr: float = 3e-4
    warmup: int = 20
    weight_decay: float = 0.01
    eval_strategy: str = ""
    eval_limit: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(vocab_size=self.vocab_size, d_model=self.d_model, n_layers=self.n_layers,
                           n_heads=self.n_heads, max_positions=self.max_positions, block_size=self.block_size,
                           d_vis=self.d_vis)

    def stage_config(self, stage: str, block_size: int | None = None) -> TrainConfig:
        if stage == "ConnectorAR":
            steps, lr = self.connector_steps, self.connector_lr
        elif stage == "PretrainTextAR":
            steps, lr = self.pretrain_steps, self.pretrain_lr
        else:
            steps, lr = self.steps, self.lr
        return TrainConfig(stage=stage, lr=lr, steps=steps, batch=self.batch, seed=self.seed,
                           block_size=block_size or self.block_size, warmup=self.warmup,
                           weight_decay=self.weight_decay)

    def sweep_block_sizes(self) -> list[int]:
        if not self.block_sizes.strip():
            return [self.block_size]
        return [int(x) for x in self.block_sizes.replace(";", ",").split(",") if x.strip()]

    def load_data(self) -> tuple[list[Sample], list[Sample]]:
        if self.dataset:
            samples = load_dataset(self.dataset)
        else:
            samples = gen_dataset(self.n_samples, self.grid, self.colors, self.data_seed, self.val_fraction)
        train, val = train_val_split(samples)
        if self.eval_limit:
            val = val[: self.eval_limit]
        return train, val


def parse_config_text(text: str) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in fields:
            raise ValueError(f"line {lineno}: unknown or malformed entry {raw.strip()!r}")
        kind = fields[key].type
        try:
            values[key] = int(value) if kind == "int" else float(value) if kind == "float" else value
        except ValueError:
            raise ValueError(f"line {lineno}: {key} expects {kind}, got {value!r}") from None
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def dump_config(config: RunConfig) -> str:
    return "".join(f"{f.name} = {getattr(config, f.name)}\n" for f in dataclasses.fields(config))


@dataclass
class PipelineResult:
    stages: list
    params: Parameters
    records: list
    branches: dict = field(default_factory=dict)


def save_stage(params, record, out_dir, name, extra=None):
    path = Path(out_dir) / name
    save_checkpoint(params, path, extra={"stage": record.stage, **(extra or {})})
    record.checkpoint = str(path)
    record.write_loss_csv(path / "loss.csv")


def pretrain_text_ar(config: RunConfig, train: list[Sample] | None = None) -> tuple[Parameters, RunRecord]:
    """Toy AR language model: next-token training on prompt + caption text, no image."""
    train = train if train is not None else config.load_data()[0]
    params = init_params(config.model_config(), config.seed)
    params, record = train_stage(params, config.stage_config("PretrainTextAR"), train)
    save_stage(params, record, config.out_dir, "text_ar")
    return params, record


def _require_base(config: RunConfig) -> Parameters:
    if not config.base_checkpoint or not (Path(config.base_checkpoint) / "manifest.json").exists():
        raise FileNotFoundError(f"base checkpoint not found: {config.base_checkpoint!r}")
    return load_checkpoint(config.base_checkpoint)


def pipeline_from_ar_lm(config: RunConfig, evaluate_fn=None) -> PipelineResult:
    """Connector alignment (AR), then block-diffusion finetuning; an AR finetune branch runs alongside."""
    base = _require_base(config)
    train, val = config.load_data()
    aligned, rec_conn = train_stage(base, config.stage_config("ConnectorAR"), train)
    save_stage(aligned, rec_conn, config.out_dir, "connector_ar")
    diff, rec_diff = train_stage(aligned, config.stage_config("FinetuneBlockDiff"), train)
    save_stage(diff, rec_diff, config.out_dir, "block_diff")
    ar, rec_ar = train_stage(aligned, config.stage_config("FinetuneAR"), train)
    save_stage(ar, rec_ar, config.out_dir, "ar_finetune")
    if evaluate_fn is not None:
        rec_diff.metrics = evaluate_fn(diff, val, "block")
        rec_ar.metrics = evaluate_fn(ar, val, "ar")
    return PipelineResult(["ConnectorAR", "FinetuneBlockDiff"], diff, [rec_conn, rec_diff],
                          branches={"FinetuneAR": (ar, rec_ar)})


def pipeline_from_ar_vlm(config: RunConfig, evaluate_fn=None) -> PipelineResult:
    """Direct block-diffusion finetuning of an aligned AR-VLM; one run per requested block size."""
    base = _require_base(config)
    train, val = config.load_data()
    result = None
    for D in config.sweep_block_sizes():
        params, record = train_stage(base, config.stage_config("FinetuneBlockDiff", D), train)
        save_stage(params, record, config.out_dir, f"block_diff_D{D}")
        if evaluate_fn is not None:
            record.metrics = evaluate_fn(params, val, "block")
        if result is None:
            result = PipelineResult(["FinetuneBlockDiff"], params, [record])
        result.branches[f"D{D}"] = (params, record)
    return result


def build_ar_vlm(config: RunConfig) -> PipelineResult:
    """Toy AR-VLM base: text AR pretraining, connector alignment, then AR finetuning."""
    train, _ = config.load_data()
    text, rec_text = pretrain_text_ar(config, train)
    aligned, rec_conn = train_stage(text, config.stage_config("ConnectorAR"), train)
    save_stage(aligned, rec_conn, config.out_dir, "connector_ar")
    ar, rec_ar = train_stage(aligned, config.stage_config("FinetuneAR"), train)
    save_stage(ar, rec_ar, config.out_dir, "ar_vlm")
    return PipelineResult(["PretrainTextAR", "ConnectorAR", "FinetuneAR"], ar, [rec_text, rec_conn, rec_ar])
