import numpy as np
import pytest

from blockvlm import masks
from blockvlm.data import GridImage, Sample
from blockvlm.decoding import (DecodeSession, Dynamic, Static, commit_block, confidence, denoise_block, generate,
                               generate_ar, generate_reference, parse_strategy, prefill, static_schedule)
from blockvlm.model import ModelConfig, embed_prompt, forward, init_params
from blockvlm import tensor as T
from blockvlm.training import TrainConfig, train_stage

IMAGE = GridImage(3, (0, 1, 2, 3, 0, 1, 2, 3, 0), 4)
PROMPT = [0, 10, 11, 12, 13]


@pytest.fixture(scope="module")
def params8():
    return init_params(ModelConfig(d_model=32, n_layers=2, n_heads=4, max_positions=256, block_size=8, d_vis=8), 1)


def _overfit(D, caption="ab", steps=150):
    cfg = ModelConfig(d_model=32, n_layers=2, n_heads=4, max_positions=128, block_size=D, d_vis=8)
    data = [Sample(GridImage(2, (0, 1, 2, 3), 4), caption)]
    tc = TrainConfig(stage="FinetuneBlockDiff", lr=3e-3, steps=steps, batch=1, seed=0, warmup=5)
    params, _ = train_stage(init_params(cfg, 0), tc, data)
    return params


@pytest.fixture(scope="module")
def overfit4():
    return _overfit(4)


@pytest.fixture(scope="module")
def overfit2():
    return _overfit(2)


def test_static_schedules():
    assert static_schedule(8, 4) == [2, 2, 2, 2]
    assert static_schedule(8, 3) == [3, 3, 2]
    assert static_schedule(8, 8) == [1] * 8
    assert static_schedule(8, 1) == [8]
    with pytest.raises(ValueError):
        static_schedule(8, 9)


def test_confidence():
    assert confidence(np.zeros(4))[1] == pytest.approx(0.25)
    tok, score = confidence(np.array([0.0, 1e9, 0.0]))
    assert tok == 1 and score == pytest.approx(1.0)
    assert confidence(np.array([2.0, 0.0]))[1] == pytest.approx(np.exp(2) / (np.exp(2) + 1), abs=1e-12)
    assert confidence(np.array([2.0, 0.0]))[1] == pytest.approx(0.8808, abs=1e-4)


def test_parse_strategy():
    assert parse_strategy("static:4") == Static(4)
    assert parse_strategy("dynamic:0.9") == Dynamic(0.9)
    for bad in ("static:x", "fast:2", "dynamic:2"):
        with pytest.raises(ValueError):
            parse_strategy(bad)


def test_prefill_lengths(params8):
    assert prefill(params8, IMAGE, PROMPT).length == 14
    assert prefill(params8, None, PROMPT).length == 5
    with pytest.raises(ValueError):
        prefill(params8, IMAGE, [])


def test_prefill_then_next_token_matches_monolithic(params8):
    cache = prefill(params8, IMAGE, PROMPT)
    nxt = forward(params8, [20], [14], masks.block_decode_mask(14, 1), cache).logits.data
    x = T.concat([embed_prompt(params8, IMAGE, PROMPT), T.embedding(params8["tok_emb"], np.array([20]))], axis=0)
    full = forward(params8, x, np.arange(15), masks.causal_mask(15)).logits.data
    np.testing.assert_allclose(nxt[0], full[-1], atol=1e-5)


@pytest.mark.parametrize("strategy,counts", [
    (Static(4), [2, 2, 2, 2]),
    (Static(3), [3, 3, 2]),
    (Static(8), [1] * 8),
    (Dynamic(0.0), [8]),
    (Dynamic(1.0), [1] * 8),
])
def test_denoise_block_counts(params8, strategy, counts):
    cache = prefill(params8, IMAGE, PROMPT)
    tokens, trace = denoise_block(params8, cache, strategy)
    assert [len(e.positions) for e in trace] == counts
    assert len(tokens) == 8 and not np.any(tokens == params8.config.mask_id)
    seen = [p for e in trace for p in e.positions]
    assert sorted(seen) == list(range(8))


def test_decided_tokens_never_change(params8):
    cache = prefill(params8, IMAGE, PROMPT)
    tokens, trace = denoise_block(params8, cache, Static(4))
    for e in trace:
        assert tokens[e.positions].tolist() == e.tokens


def test_static_picks_highest_confidence(params8):
    cache = prefill(params8, IMAGE, PROMPT)
    _, trace = denoise_block(params8, cache, Static(2))
    first = trace[0]
    block = np.full(8, params8.config.mask_id)
    logits = forward(params8, block, 14 + np.arange(8), masks.block_decode_mask(14, 8), cache).logits.data
    logits[:, params8.config.mask_id] = -1e9
    scores = np.array([confidence(r)[1] for r in logits])
    assert sorted(first.positions) == sorted(np.argsort(-scores, kind="stable")[:4].tolist())


def test_dynamic_first_step_count_non_increasing_in_threshold(params8):
    cache = prefill(params8, IMAGE, PROMPT)
    counts = []
    for tau in (0.0, 0.02, 0.05, 0.1, 0.3, 0.6, 1.0):
        _, trace = denoise_block(params8, cache, Dynamic(tau))
        counts.append(len(trace[0].positions))
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_commit_matches_monolithic_block_causal(params8):
    cache = prefill(params8, IMAGE, PROMPT)
    block = np.array([5, 6, 7, 8, 9, 10, 11, 12])
    cache2 = commit_block(params8, cache, block)
    assert cache2.length == 22 and cache.length == 14
    nxt = np.array([13, 14, 15, 16, 17, 18, 19, 20])
    cached = forward(params8, nxt, 22 + np.arange(8), masks.block_decode_mask(22, 8), cache2).logits.data
    x = T.concat([embed_prompt(params8, IMAGE, PROMPT), T.embedding(params8["tok_emb"], np.concatenate([block, nxt]))],
                 axis=0)
    full = forward(params8, x, np.arange(30), masks.block_causal_mask(14, 16, 8)).logits.data
    np.testing.assert_allclose(cached, full[-8:], atol=1e-5)


def test_session_rejects_double_commit(params8):
    s = DecodeSession(params8, IMAGE, PROMPT)
    s.denoise(Static(8))
    s.commit()
    with pytest.raises(RuntimeError):
        s.commit()
    s.denoise(Static(8))
    with pytest.raises(RuntimeError):
        s.denoise(Static(8))


def test_commit_rejects_masked_block(params8):
    cache = prefill(params8, IMAGE, PROMPT)
    with pytest.raises(ValueError):
        commit_block(params8, cache, [params8.config.mask_id] * 8)


@pytest.mark.parametrize("strategy", [Static(1), Static(3), Static(8), Dynamic(0.3)])
def test_cached_generation_matches_reference(params8, strategy):
    for seed in range(3):
        cells = tuple(np.random.default_rng(seed).integers(0, 4, 9).tolist())
        image = GridImage(3, cells, 4)
        a = generate(params8, image, PROMPT, strategy, max_blocks=3)
        b = generate_reference(params8, image, PROMPT, strategy, max_blocks=3)
        assert a.tokens == b.tokens


def test_static_forward_accounting(params8):
    res = generate(params8, IMAGE, PROMPT, Static(4), max_blocks=3)
    blocks = res.stats.blocks
    assert res.stats.denoise_forwards == 4 * blocks
    assert res.stats.commit_forwards == blocks
    assert sum(res.stats.per_step_decode_counts) == res.stats.tokens_generated == 8 * blocks
    assert res.stats.parallelism == pytest.approx(2.0)


def test_overfit_model_generates_and_stops(overfit4):
    res = generate(overfit4, GridImage(2, (0, 1, 2, 3), 4), "describe the grid", Static(4), max_blocks=3)
    assert res.text == "ab"
    assert res.stats.blocks == 1 and res.stats.tokens_generated == 4
    assert not res.truncated


def test_eos_block_stops_generation(overfit2):
    res = generate(overfit2, GridImage(2, (0, 1, 2, 3), 4), "describe the grid", Static(2), max_blocks=3)
    assert res.text == "ab"
    assert res.stats.blocks == 2
    short = generate(overfit2, GridImage(2, (0, 1, 2, 3), 4), "describe the grid", Static(2), max_blocks=1)
    assert short.truncated and short.text == "ab"


def test_full_step_static_is_one_token_per_pass(overfit4):
    res = generate(overfit4, GridImage(2, (0, 1, 2, 3), 4), "describe the grid", Static(4), max_blocks=2)
    assert res.stats.denoise_forwards == 4 * res.stats.blocks
    assert res.stats.parallelism == 1.0


def test_ar_generation_counts_one_pass_per_token(params8):
    res = generate_ar(params8, IMAGE, PROMPT, max_tokens=10)
    assert res.stats.denoise_forwards == res.stats.tokens_generated == len(res.tokens)
    assert res.stats.parallelism == 1.0


def test_trace_callback(params8):
    events = []
    generate(params8, IMAGE, PROMPT, Static(2), max_blocks=1, on_step=events.append)
    assert len(events) == 2 and events[0].format().startswith("block=0 step=0")
