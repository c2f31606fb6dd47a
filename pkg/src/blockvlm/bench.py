"""Quality and speed evaluation over the grid-caption task, with CSV output."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .data import Sample, Tokenizer, is_well_formed
from .decoding import DecodeStats, Dynamic, Static, generate, generate_ar
from .model import Parameters
from .objectives import answer_ids_for, prompt_ids_for

CSV_VERSION = "# blockvlm-bench v1"


@dataclass
class BenchRow:
    strategy: str
    block_size: int
    steps_or_threshold: float
    token_accuracy: float
    exact_match_rate: float
    denoise_forwards: int
    commit_forwards: int
    parallelism: float
    tokens_per_second: float
    tokens_generated: int = 0
    wall_time: float = 0.0

    def check(self, tol: float = 1e-9) -> None:
        if self.denoise_forwards and abs(self.parallelism - self.tokens_generated / self.denoise_forwards) > tol:
            raise ValueError(f"parallelism column inconsistent for {self.strategy}")


COLUMNS = [f.name for f in dataclasses.fields(BenchRow)]


def token_accuracy(generated: list[int], reference: list[int]) -> float:
    """Fraction of reference positions matched by the generated stream (cut after its first EOS)."""
    hits = sum(1 for g, r in zip(generated, reference) if g == r)
    return hits / len(reference)


def evaluate(params: Parameters, samples: list[Sample], mode: str = "block", strategy=None,
             max_blocks: int | None = None, tokenizer: Tokenizer | None = None) -> dict:
    """Decode every sample greedily and score it against its caption.

    ``mode`` is "block" (block decoding with ``strategy``) or "ar".
    """
    if not samples:
        raise ValueError("evaluation set is empty")
    tokenizer = tokenizer or Tokenizer(vocab_size=params.config.vocab_size)
    D = params.config.block_size
    stats = DecodeStats()
    acc = exact = well = 0.0
    for s in samples:
        reference = answer_ids_for(tokenizer, s.caption)
        limit = max_blocks or (len(reference) // D + 2)
        prompt = prompt_ids_for(tokenizer, s.prompt)
        if mode == "ar":
            res = generate_ar(params, s.image, prompt, max_tokens=limit * D, tokenizer=tokenizer)
        elif mode == "block":
            res = generate(params, s.image, prompt, strategy or Static(D), limit, tokenizer)
        else:
            raise ValueError(f"unknown evaluation mode {mode!r}")
        eos = params.config.eos_id
        stream = res.tokens[: res.tokens.index(eos) + 1] if eos in res.tokens else res.tokens
        acc += token_accuracy(stream, reference)
        exact += res.text == s.caption
        well += is_well_formed(res.text, s.image.size)
        stats.merge(res.stats)
    n = len(samples)
    return {
        "token_accuracy": acc / n,
        "exact_match_rate": exact / n,
        "well_formed_rate": well / n,
        "tokens_generated": stats.tokens_generated,
        "denoise_forwards": stats.denoise_forwards,
        "commit_forwards": stats.commit_forwards,
        "parallelism": stats.parallelism,
        "wall_time": stats.wall_time,
        "tokens_per_second": stats.tokens_generated / stats.wall_time if stats.wall_time else 0.0,
    }


def bench_row(params: Parameters, samples, strategy) -> BenchRow:
    m = evaluate(params, samples, "block", strategy)
    value = strategy.steps if isinstance(strategy, Static) else strategy.threshold
    return BenchRow(str(strategy), params.config.block_size, float(value), m["token_accuracy"],
                    m["exact_match_rate"], m["denoise_forwards"], m["commit_forwards"], m["parallelism"],
                    m["tokens_per_second"], m["tokens_generated"], m["wall_time"])


def bench_steps(params: Parameters, samples, steps_list) -> list[BenchRow]:
    return [bench_row(params, samples, Static(int(s))) for s in steps_list]


def bench_dynamic(params: Parameters, samples, thresholds) -> list[BenchRow]:
    return [bench_row(params, samples, Dynamic(float(t))) for t in thresholds]


def write_csv(rows: list[BenchRow], path_or_file) -> None:
    def emit(fh):
        fh.write(CSV_VERSION + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in dataclasses.astuple(row)])

    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w", encoding="utf-8", newline="") as fh:
            emit(fh)


def read_csv(path) -> list[BenchRow]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CSV_VERSION:
        raise ValueError(f"missing or unknown CSV version line in {path}")
    reader = csv.DictReader(lines[1:])
    types = {f.name: f.type for f in dataclasses.fields(BenchRow)}
    rows = []
    for rec in reader:
        kwargs = {k: (int(v) if types[k] == "int" else float(v) if types[k] == "float" else v) for k, v in rec.items()}
        row = BenchRow(**kwargs)
        row.check()
        rows.append(row)
    return rows
