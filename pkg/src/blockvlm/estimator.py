"""scikit-learn style wrapper: ``fit`` trains a captioner on grids, ``predict`` decodes captions."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .bench import token_accuracy
from .data import COLOR_NAMES, DEFAULT_PROMPT, GridImage, Sample, Tokenizer, caption_for
from .decoding import Dynamic, Static, generate, generate_ar
from .model import ModelConfig, init_params, load_checkpoint
from .objectives import answer_ids_for, prompt_ids_for
from .training import TrainConfig, train_stage

_STAGE_FOR = {"ar": "FinetuneAR", "full_diffusion": "FinetuneFullDiff", "block_diffusion": "FinetuneBlockDiff"}


def check_grids(X, n_colors: int = len(COLOR_NAMES)) -> np.ndarray:
    """Validate grids given as GridImages or an (n_samples, G*G) integer array."""
    if len(X) and isinstance(X[0], GridImage):
        X = [g.cells for g in X]
    X = check_array(X, dtype=np.int64, ensure_2d=True)
    side = int(round(X.shape[1] ** 0.5))
    if side * side != X.shape[1]:
        raise ValueError(f"each row must hold a square grid, got {X.shape[1]} cells")
    if X.min() < 0 or X.max() >= n_colors:
        raise ValueError(f"cell values must lie in [0, {n_colors})")
    return X


class BlockDiffusionCaptioner(BaseEstimator):
    """Grid captioner trained with an AR, full-diffusion or block-diffusion objective.

    Parameters
    ----------
    objective : {"block_diffusion", "full_diffusion", "ar"}
        Training loss. Predictions use block decoding for the diffusion
        objectives and next-token decoding for "ar".
    block_size : int
        Answer block length used in training and decoding.
    decode : str
        "static" (``decode_steps`` passes per block, default ``block_size``)
        or "dynamic" (confidence ``threshold``).
    init_checkpoint : str or None
        Start from a saved checkpoint instead of a fresh initialization,
        e.g. to convert an AR model by finetuning.
    """

    def __init__(self, *, objective="block_diffusion", block_size=8, d_model=64, n_layers=2, n_heads=4, d_vis=32,
                 steps=800, lr=1e-3, batch_size=16, decode="static", decode_steps=None, threshold=0.9,
                 init_checkpoint=None, random_state=0):
        self.objective = objective
        self.block_size = block_size
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_vis = d_vis
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.decode = decode
        self.decode_steps = decode_steps
        self.threshold = threshold
        self.init_checkpoint = init_checkpoint
        self.random_state = random_state

    def _samples(self, X, y=None):
        X = check_grids(X)
        side = int(round(X.shape[1] ** 0.5))
        images = [GridImage(side, tuple(row.tolist())) for row in X]
        captions = [caption_for(g) for g in images] if y is None else list(y)
        if len(captions) != len(images):
            raise ValueError("X and y have different lengths")
        return [Sample(g, c, DEFAULT_PROMPT) for g, c in zip(images, captions)]

    def fit(self, X, y=None):
        """Train on grids ``X``; ``y`` defaults to the canonical captions."""
        if self.objective not in _STAGE_FOR:
            raise ValueError(f"objective must be one of {sorted(_STAGE_FOR)}")
        samples = self._samples(X, y)
        if self.init_checkpoint:
            params = load_checkpoint(self.init_checkpoint)
        else:
            config = ModelConfig(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
                                 block_size=self.block_size, d_vis=self.d_vis)
            params = init_params(config, self.random_state)
        stage = TrainConfig(stage=_STAGE_FOR[self.objective], lr=self.lr, steps=self.steps, batch=self.batch_size,
                            seed=self.random_state, block_size=self.block_size)
        self.params_, self.record_ = train_stage(params, stage, samples)
        self.n_features_in_ = check_grids(X).shape[1]
        return self

    def _strategy(self):
        if self.decode == "static":
            return Static(self.decode_steps or self.block_size)
        if self.decode == "dynamic":
            return Dynamic(self.threshold)
        raise ValueError(f"decode must be 'static' or 'dynamic', got {self.decode!r}")

    def _decode(self, X):
        check_is_fitted(self, "params_")
        tokenizer = Tokenizer(vocab_size=self.params_.config.vocab_size)
        prompt = prompt_ids_for(tokenizer, DEFAULT_PROMPT)
        X = check_grids(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected grids with {self.n_features_in_} cells, got {X.shape[1]}")
        side = int(round(X.shape[1] ** 0.5))
        max_blocks = (X.shape[1] * 9 + 1) // self.block_size + 2
        results = []
        for row in X:
            image = GridImage(side, tuple(row.tolist()))
            if self.objective == "ar":
                results.append(generate_ar(self.params_, image, prompt, max_blocks * self.block_size, tokenizer))
            else:
                results.append(generate(self.params_, image, prompt, self._strategy(), max_blocks, tokenizer))
        return results

    def predict(self, X):
        return np.array([r.text for r in self._decode(X)], dtype=object)

    def score(self, X, y=None):
        """Mean token accuracy of the decoded captions (EOS included)."""
        tokenizer = Tokenizer(vocab_size=self.params_.config.vocab_size) if hasattr(self, "params_") else Tokenizer()
        samples = self._samples(X, y)
        eos = tokenizer.eos_id
        accs = []
        for s, res in zip(samples, self._decode(X)):
            stream = res.tokens[: res.tokens.index(eos) + 1] if eos in res.tokens else res.tokens
            accs.append(token_accuracy(stream, answer_ids_for(tokenizer, s.caption)))
        return float(np.mean(accs))
