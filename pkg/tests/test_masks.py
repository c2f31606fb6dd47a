import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockvlm import masks


def test_causal_small_cases():
    assert masks.causal_mask(1).tolist() == [[True]]
    m = masks.causal_mask(3)
    assert np.array_equal(m, np.tril(np.ones((3, 3), bool)))
    assert m.sum(axis=1).tolist() == [1, 2, 3]


def test_full_diffusion_mask():
    assert masks.full_diffusion_mask(0, 3).all()
    m = masks.full_diffusion_mask(2, 2)
    assert m[2].all() and m[3].all()
    assert m[0].tolist() == [True, False, False, False]


def test_block_causal_reductions():
    P, L = 3, 8
    single = masks.block_causal_mask(P, L, L)
    assert np.array_equal(single[P:], masks.full_diffusion_mask(P, L)[P:])
    unit = masks.block_causal_mask(P, L, 1)
    assert np.array_equal(unit, masks.causal_mask(P + L))


def test_block_causal_hand_enumerated():
    expected = np.array([
        [1, 1, 0, 0],
        [1, 1, 0, 0],
        [1, 1, 1, 1],
        [1, 1, 1, 1],
    ], dtype=bool)
    assert np.array_equal(masks.block_causal_mask(0, 4, 2), expected)


def test_block_causal_rejects_ragged_answer():
    with pytest.raises(ValueError):
        masks.block_causal_mask(2, 5, 2)


def test_hybrid_first_noisy_block_sees_only_prompt_and_itself():
    P, L, D = 3, 8, 4
    m = masks.hybrid_training_mask(P, L, D)
    rows = m[P + L : P + L + D]
    assert rows[:, :P].all()
    assert not rows[:, P : P + L].any()
    assert rows[:, P + L : P + L + D].all()
    assert not rows[:, P + L + D :].any()


def test_hybrid_unit_blocks_match_next_token_information():
    P, L = 2, 5
    m = masks.hybrid_training_mask(P, L, 1)
    causal = masks.causal_mask(P + L)
    for i in range(L):
        noisy_row = m[P + L + i]
        visible_clean = {k - P for k in np.flatnonzero(noisy_row[: P + L]) if k >= P}
        visible_prompt = set(np.flatnonzero(noisy_row[:P]))
        visible_noisy = set(np.flatnonzero(noisy_row[P + L :]))
        # AR prediction of answer i sees the prompt and answer tokens < i
        ar_row = causal[P + i - 1] if P + i - 1 >= 0 else np.zeros(P + L, bool)
        assert visible_prompt == set(np.flatnonzero(ar_row[:P]))
        assert visible_clean == {k - P for k in np.flatnonzero(ar_row) if k >= P}
        assert visible_noisy == {i}


def test_hybrid_nine_by_nine_matches_rules():
    P, L, D = 1, 4, 2
    m = masks.hybrid_training_mask(P, L, D)
    assert m.shape == (9, 9)
    expected = np.array([
        # p  c0 c1 c2 c3 n0 n1 n2 n3
        [1, 0, 0, 0, 0, 0, 0, 0, 0],
        [1, 1, 1, 0, 0, 0, 0, 0, 0],
        [1, 1, 1, 0, 0, 0, 0, 0, 0],
        [1, 1, 1, 1, 1, 0, 0, 0, 0],
        [1, 1, 1, 1, 1, 0, 0, 0, 0],
        [1, 0, 0, 0, 0, 1, 1, 0, 0],
        [1, 0, 0, 0, 0, 1, 1, 0, 0],
        [1, 1, 1, 0, 0, 0, 0, 1, 1],
        [1, 1, 1, 0, 0, 0, 0, 1, 1],
    ], dtype=bool)
    assert np.array_equal(m, expected)


sizes = st.tuples(st.integers(0, 8), st.integers(1, 6), st.sampled_from([1, 2, 4, 8])).map(
    lambda t: (t[0], t[1] * t[2], t[2]))


@settings(max_examples=200, deadline=None)
@given(sizes)
def test_hybrid_properties(size):
    P, L, D = size
    m = masks.hybrid_training_mask(P, L, D)
    assert m.any(axis=1).all()
    assert np.array_equal(m[: P + L, : P + L], masks.block_causal_mask(P, L, D))
    assert not m[: P + L, P + L :].any()
    nb = L // D
    for i in range(nb):
        rows = m[P + L + i * D : P + L + (i + 1) * D]
        # clean keys of blocks >= i never visible
        assert not rows[:, P + i * D : P + L].any()
    for i in range(nb - 1):
        own = m[P + L + i * D, : P + L]
        nxt = m[P + L + (i + 1) * D, : P + L]
        assert (own <= nxt).all() and (nxt & ~own).any()


def test_predicate_form_agrees_with_matrix():
    P, L, D = 2, 6, 2
    m = masks.hybrid_training_mask(P, L, D)
    for q in range(P + 2 * L):
        for k in range(P + 2 * L):
            assert m[q, k] == masks.hybrid_allows(P, L, D, q, k)


def test_render_grid():
    assert masks.render(masks.causal_mask(2)) == "#.\n##"
