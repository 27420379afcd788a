"""Scikit-learn style estimator wrapping the training/inference pipeline.

The estimator consumes lists of ``Case`` objects (indexable like any sklearn
X) so it composes with ``clone``, ``get_params``/``set_params`` and friends
while keeping the volumetric data model intact.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import ConfigError, NoForeground
from .evalstat import dice, train_val_split
from .model import LossConfig, UNetConfig
from .pipeline import (
    InferenceConfig,
    SamplerConfig,
    TrainConfig,
    largest_component,
    predict,
    resolve_selection,
    train,
)
from .volgrid import Case, LabelMask, Volume3


def check_cases(X, require_mask: bool = False) -> list[Case]:
    """Validate an estimator input: a non-empty sequence of Case objects."""
    if isinstance(X, Case):
        X = [X]
    cases = list(X)
    if not cases:
        raise ValueError("need at least one case")
    for c in cases:
        if not isinstance(c, Case):
            raise TypeError(f"expected Case instances, got {type(c).__name__}")
    if require_mask:
        for c in cases:
            if c.mask is None:
                raise NoForeground(f"case {c.case_id!r} has no ground-truth mask")
    if len({c.case_id for c in cases}) != len(cases):
        raise ValueError("case ids must be unique")
    return cases


class CavitySegmenter(BaseEstimator):
    """Binary cavity segmenter: a 3-level volumetric U-Net trained with the
    asymmetric overlap loss, checkpointed on validation Jaccard.

    Parameters
    ----------
    sequences : "all", a sequence name ("t1", "t1c", "t2", "flair"), or an
        iterable of them. Determines the input channels (1 or 4).
    levels, convs_per_block, base_channels : architecture size.
    alpha, beta : false-positive / false-negative loss weights.
    patch_size : cubic edge or (px, py, pz); must be divisible by
        2**(levels-1) and fit inside the training volumes.
    fg_fraction : fraction of training patches that must contain foreground.
    batch_size, max_iterations, val_check_interval, learning_rate : training.
    window, overlap, threshold : sliding-window inference; window defaults to
        patch_size.
    connectivity : 6 or 26 for the post-filter.
    keep_largest : apply the largest-component filter in predict().
    random_state : master seed for initialization, splits and sampling.
    """

    def __init__(
        self,
        sequences="all",
        levels: int = 3,
        convs_per_block: int = 2,
        base_channels: int = 8,
        alpha: float = 0.2,
        beta: float = 0.8,
        patch_size=44,
        fg_fraction: float = 0.8,
        batch_size: int = 5,
        max_iterations: int = 500,
        val_check_interval: int = 100,
        learning_rate: float = 1e-3,
        window=None,
        overlap: float = 0.5,
        threshold: float = 0.5,
        connectivity: int = 26,
        keep_largest: bool = True,
        random_state: int = 0,
    ):
        self.sequences = sequences
        self.levels = levels
        self.convs_per_block = convs_per_block
        self.base_channels = base_channels
        self.alpha = alpha
        self.beta = beta
        self.patch_size = patch_size
        self.fg_fraction = fg_fraction
        self.batch_size = batch_size
        self.max_iterations = max_iterations
        self.val_check_interval = val_check_interval
        self.learning_rate = learning_rate
        self.window = window
        self.overlap = overlap
        self.threshold = threshold
        self.connectivity = connectivity
        self.keep_largest = keep_largest
        self.random_state = random_state

    # -- config assembly -------------------------------------------------

    def _triple(self, value) -> tuple[int, int, int]:
        if value is None:
            value = self.patch_size
        if isinstance(value, (int, np.integer)):
            return (int(value),) * 3
        t = tuple(int(v) for v in value)
        if len(t) != 3:
            raise ConfigError(f"expected an int or 3 ints, got {value!r}")
        return t

    def _configs(self):
        seqs = resolve_selection(self.sequences)
        model_cfg = UNetConfig(
            levels=self.levels,
            convs_per_block=self.convs_per_block,
            base_channels=self.base_channels,
            in_channels=len(seqs),
            seed=self.random_state,
        )
        sampler_cfg = SamplerConfig(
            patch_size=self._triple(self.patch_size),
            fg_fraction=self.fg_fraction,
            seed=self.random_state,
        )
        train_cfg = TrainConfig(
            batch_size=self.batch_size,
            max_iterations=self.max_iterations,
            val_check_interval=self.val_check_interval,
            learning_rate=self.learning_rate,
            loss=LossConfig(alpha=self.alpha, beta=self.beta),
            seed=self.random_state,
        )
        infer_cfg = InferenceConfig(
            window=self._triple(self.window),
            overlap_fraction=self.overlap,
            threshold=self.threshold,
            connectivity=self.connectivity,
        )
        return seqs, model_cfg, sampler_cfg, train_cfg, infer_cfg

    # -- sklearn API -------------------------------------------------------

    def fit(self, X, y=None):
        """Train on a list of cases with masks; a validation subset (20%) is
        carved out internally. A single case trains and validates on itself
        (overfit mode)."""
        cases = check_cases(X, require_mask=True)
        seqs, model_cfg, sampler_cfg, train_cfg, _ = self._configs()
        if len(cases) == 1:
            train_cases = val_cases = cases
        else:
            by_id = {c.case_id: c for c in cases}
            train_ids, val_ids = train_val_split(sorted(by_id), seed=self.random_state)
            train_cases = [by_id[i] for i in train_ids]
            val_cases = [by_id[i] for i in val_ids]
        result = train(train_cases, val_cases, seqs, model_cfg, sampler_cfg, train_cfg)
        self.checkpoint_ = result.checkpoint
        self.val_history_ = result.val_history
        self.n_iterations_ = result.iterations_run
        return self

    def _require_fitted(self):
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError("this CavitySegmenter is not fitted; call fit first")

    def predict(self, X) -> list[LabelMask]:
        """Thresholded masks, largest-component filtered when keep_largest."""
        self._require_fitted()
        cases = check_cases(X)
        seqs, _, _, _, infer_cfg = self._configs()
        out = []
        for case in cases:
            _, mask = predict(self.checkpoint_, case, seqs, infer_cfg)
            if self.keep_largest:
                mask = largest_component(mask, infer_cfg.connectivity)
            out.append(mask)
        return out

    def predict_proba(self, X) -> list[Volume3]:
        """Overlap-averaged probability volumes."""
        self._require_fitted()
        cases = check_cases(X)
        seqs, _, _, _, infer_cfg = self._configs()
        return [predict(self.checkpoint_, case, seqs, infer_cfg)[0] for case in cases]

    def score(self, X, y=None) -> float:
        """Mean DICE of predictions against the cases' own masks."""
        cases = check_cases(X, require_mask=True)
        masks = self.predict(cases)
        return float(np.mean([dice(m, c.mask) for m, c in zip(masks, cases)]))
