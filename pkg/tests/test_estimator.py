import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from blockvlm import BlockDiffusionCaptioner
from blockvlm.data import GridImage, caption_for
from blockvlm.estimator import check_grids

SMALL = dict(block_size=4, d_model=32, n_layers=1, n_heads=2, d_vis=8, batch_size=4)


def test_params_round_trip_through_clone():
    est = BlockDiffusionCaptioner(steps=5, decode="dynamic", threshold=0.5)
    params = est.get_params()
    assert params["steps"] == 5 and params["threshold"] == 0.5
    twin = clone(est)
    assert twin.get_params() == params
    assert twin.set_params(steps=9).steps == 9


def test_check_grids():
    X = check_grids([GridImage(2, (0, 1, 2, 3), 4)])
    assert X.shape == (1, 4)
    with pytest.raises(ValueError):
        check_grids(np.zeros((2, 5), int))
    with pytest.raises(ValueError):
        check_grids(np.full((1, 4), 9))


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        BlockDiffusionCaptioner().predict(np.zeros((1, 4), int))


def test_unknown_objective():
    with pytest.raises(ValueError):
        BlockDiffusionCaptioner(objective="gan", **SMALL).fit(np.zeros((2, 4), int))


def test_fit_predict_memorizes_one_grid():
    X = np.array([[0, 1, 2, 3]])
    est = BlockDiffusionCaptioner(steps=250, lr=3e-3, **SMALL).fit(X, ["ab"])
    assert list(est.predict(X)) == ["ab"]
    assert est.score(X, ["ab"]) == 1.0
    assert len(est.record_.losses) == 250


@pytest.mark.parametrize("objective", ["ar", "full_diffusion"])
def test_other_objectives_fit_and_predict(objective):
    X = np.array([[0, 1, 2, 3], [3, 2, 1, 0]])
    est = BlockDiffusionCaptioner(objective=objective, steps=3, **SMALL).fit(X)
    out = est.predict(X)
    assert out.shape == (2,)
    assert 0.0 <= est.score(X) <= 1.0


def test_predict_rejects_wrong_grid_size():
    est = BlockDiffusionCaptioner(steps=1, **SMALL).fit(np.zeros((1, 4), int))
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 9), int))


def test_default_targets_are_canonical_captions():
    est = BlockDiffusionCaptioner(**SMALL)
    samples = est._samples(np.array([[0, 1, 2, 3]]))
    assert samples[0].caption == caption_for(GridImage(2, (0, 1, 2, 3), 4))
