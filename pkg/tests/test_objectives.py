import math

import numpy as np
import pytest

from blockvlm import masks
from blockvlm import tensor as T
from blockvlm.model import init_params
from blockvlm.objectives import (ar_loss, block_diffusion_loss, corrupt, full_diffusion_loss, make_batch)


@pytest.fixture
def batch(samples, tokenizer, tiny_config):
    return make_batch(samples[:3], tokenizer, tiny_config.block_size)


def _zero_head(params):
    return params.replace({"head": np.zeros_like(params["head"].data)})


def test_ar_loss_uniform_at_zero_head(tiny_params, batch):
    assert ar_loss(_zero_head(tiny_params), batch).item() == pytest.approx(math.log(64), abs=0.05)


def test_full_diffusion_uniform_at_zero_head(tiny_params, batch):
    loss = full_diffusion_loss(_zero_head(tiny_params), batch, np.random.default_rng(0), t=1.0)
    assert loss.item() == pytest.approx(math.log(64), abs=1e-4)


def test_ar_loss_single_token_answer(tiny_params, samples, tokenizer):
    b = make_batch(samples[:1], tokenizer, 1)
    b.answers = b.answers[:, :1]
    P = b.prompt_len
    from blockvlm.model import embed_prompt, embed_tokens, forward
    x = T.concat([embed_prompt(tiny_params, b.images, b.prompt_ids), embed_tokens(tiny_params, b.answers)], axis=1)
    logits = forward(tiny_params, x, np.arange(P + 1), masks.causal_mask(P + 1)).logits.data[0, P - 1]
    expected = -(logits - logits.max() - np.log(np.exp(logits - logits.max()).sum()))[b.answers[0, 0]]
    assert ar_loss(tiny_params, b).item() == pytest.approx(float(expected), rel=1e-5)


def test_block_equals_full_when_one_block(tiny_params, samples, tokenizer):
    b = make_batch(samples[:2], tokenizer, 4)
    L = b.answers.shape[1]
    for seed in range(3):
        full = full_diffusion_loss(tiny_params, b, np.random.default_rng(seed)).item()
        block = block_diffusion_loss(tiny_params, b, np.random.default_rng(seed), block_size=L).item()
        assert block == pytest.approx(full, abs=1e-5)
    full = full_diffusion_loss(tiny_params, b, np.random.default_rng(0), t=1.0).item()
    block = block_diffusion_loss(tiny_params, b, np.random.default_rng(0), t=1.0, block_size=L).item()
    assert block == pytest.approx(full, abs=1e-5)


def test_forced_full_corruption_masks_everything(batch):
    noisy = corrupt(batch, np.random.default_rng(0), batch.answers.shape[1], t=1.0)
    assert all(n.masked.all() and np.all(n.weight == 1.0) for n in noisy)


def test_clean_copy_carries_no_loss(tiny_params, batch):
    # changing clean tokens of the LAST block changes no noisy-row logit, hence no loss
    noisy = corrupt(batch, np.random.default_rng(1), batch.block_size)
    b2 = batch.subset(slice(None))
    b2.answers = b2.answers.copy()
    b2.answers[:, -batch.block_size:] = 5
    # targets change too, so compare only when no last-block position is masked
    for n in noisy:
        n.masked[-batch.block_size:] = False
        n.weight[-batch.block_size:] = 0.0
    base = block_diffusion_loss(tiny_params, batch, None, noisy=noisy).item()
    other = block_diffusion_loss(tiny_params, b2, None, noisy=noisy).item()
    assert base == other


def test_batch_order_invariance(tiny_params, samples, tokenizer):
    b = make_batch(samples[:4], tokenizer, 4)
    rng = np.random.default_rng(2)
    noisy = corrupt(b, rng, 4)
    perm = [2, 0, 3, 1]
    a = block_diffusion_loss(tiny_params, b, None, noisy=noisy).item()
    c = block_diffusion_loss(tiny_params, b.subset(perm), None, noisy=[noisy[i] for i in perm]).item()
    assert a == pytest.approx(c, rel=1e-6)


def test_zeroing_a_weight_removes_its_gradient(tiny_params, batch):
    names = tiny_params.trainable()
    noisy = corrupt(batch, np.random.default_rng(4), batch.block_size)
    target = int(np.flatnonzero(noisy[0].masked)[0])

    def grads(ns):
        p = tiny_params.with_grad(names)
        g = T.backward(block_diffusion_loss(p, batch, None, noisy=ns, normalize="sum"))
        return {n: g[p[n]].astype(np.float64) for n in names}

    full = grads(noisy)
    import copy
    dropped = copy.deepcopy(noisy)
    dropped[0].weight[target] = 0.0
    without = grads(dropped)
    only = copy.deepcopy(noisy)
    for n in only:
        n.weight[:] = 0.0
    only[0].weight[target] = noisy[0].weight[target]
    single = grads(only)
    # directional probe along the full gradient
    d = {n: full[n] / (np.linalg.norm(full[n]) + 1e-12) for n in names}
    lhs = sum((full[n] - without[n]) .ravel() @ d[n].ravel() for n in names)
    rhs = sum(single[n].ravel() @ d[n].ravel() for n in names)
    assert lhs == pytest.approx(rhs, rel=1e-3, abs=1e-6)


def test_block_diffusion_gradcheck(samples, tokenizer):
    from blockvlm.model import ModelConfig
    cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, max_positions=64, block_size=4, d_vis=4)
    params = init_params(cfg, 3)
    b = make_batch(samples[:1], tokenizer, 4)
    noisy = corrupt(b, np.random.default_rng(5), 4)
    names = params.trainable()

    def f(tensors):
        p = params.astype(np.float64)
        p.tensors.update(dict(zip(names, tensors)))
        return block_diffusion_loss(p, b, None, noisy=noisy)

    assert T.grad_check(f, [params[n] for n in names], eps=1e-3, n_coords=64, rng=0) < 1e-3


def test_no_gradient_to_vision_encoder(tiny_params, batch):
    p = tiny_params.with_grad(tiny_params.names())
    g = T.backward(block_diffusion_loss(p, batch, np.random.default_rng(0)))
    assert not np.any(g[p["vision.enc"]])
    assert np.any(g[p["connector.w1"]])


def test_hybrid_unit_block_conditioning_matches_ar_information():
    P, L = 4, 6
    hybrid = masks.hybrid_training_mask(P, L, 1)
    causal = masks.causal_mask(P + L)
    for i in range(L):
        row = hybrid[P + L + i]
        info = set(np.flatnonzero(row[: P + L]))
        assert info == set(np.flatnonzero(causal[P + i - 1]))
