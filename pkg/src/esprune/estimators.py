"""Scikit-learn style wrappers around the training engine and the pruner.

``NetworkClassifier`` trains one network with plain SGD and predicts class
labels. ``EvolutionaryFilterPruner`` runs the full multi-objective pruning
search and exposes the three resulting trade-off models as fitted
classifiers. Both follow the usual conventions: constructor arguments are
stored untouched, ``fit`` returns ``self``, and learned state lives in
trailing-underscore attributes, so they compose with ``clone``,
``get_params`` and friends.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .arch import ArchSpec, build_preset, count_flops
from .data import Dataset
from .engine import ModelInstance, TrainConfig, init_model, predict_scores, train
from .evolve import ESConfig, run
from .validation import check_image_array, check_is_fitted, check_labels

_DTYPES = {"float32": np.float32, "float64": np.float64}


def _resolve_arch(arch, num_classes, input_shape) -> ArchSpec:
    if isinstance(arch, ArchSpec):
        if arch.num_classes != num_classes:
            raise ValueError(
                f"architecture expects {arch.num_classes} classes, data has {num_classes}"
            )
        return arch
    return build_preset(arch, num_classes=num_classes, input_shape=input_shape)


def _as_dataset(X, y, classes, num_classes) -> Dataset:
    labels = np.searchsorted(classes, y)
    return Dataset(X, labels, num_classes)


class NetworkClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier backed by the desk-scale numpy engine.

    Parameters
    ----------
    arch : str or ArchSpec, default "tiny_cnn"
        Preset name or explicit architecture. Presets adopt the data's
        image shape and number of classes.
    epochs, learning_rate, batch_size, seed : SGD settings.
    dtype : "float32" or "float64" array precision.
    initial_model : optional ModelInstance to start from instead of a
        fresh fan-in initialization (its architecture wins over ``arch``).
    """

    def __init__(self, arch="tiny_cnn", epochs=20, learning_rate=0.1, batch_size=64,
                 seed=0, dtype="float64", initial_model=None):
        self.arch = arch
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.dtype = dtype
        self.initial_model = initial_model

    def fit(self, X, y):
        X = check_image_array(X, dtype=_DTYPES[self.dtype])
        y = check_labels(y, len(X))
        self.classes_ = np.unique(y)
        if self.initial_model is not None:
            model = self.initial_model
        else:
            arch = _resolve_arch(self.arch, len(self.classes_), X.shape[1:])
            model = init_model(arch, seed=self.seed, dtype=_DTYPES[self.dtype])
        data = _as_dataset(X, y, self.classes_, len(self.classes_))
        self.model_ = train(model, data, TrainConfig(
            epochs=self.epochs, learning_rate=self.learning_rate,
            batch_size=self.batch_size, seed=self.seed))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_image_array(X, dtype=_DTYPES[self.dtype])
        return predict_scores(self.model_, X, batch_size=self.batch_size)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def error_rate(self, X, y) -> float:
        """Misclassification fraction, the f1 objective of the pruner."""
        y = check_labels(y, len(X))
        return float((self.predict(X) != y).mean())

    @property
    def flops_(self) -> int:
        check_is_fitted(self, "model_")
        return count_flops(self.model_.arch).total


class EvolutionaryFilterPruner(BaseEstimator):
    """Multi-objective filter-pruning search with fit/predict semantics.

    ``fit(X, y)`` trains (or accepts) a reference network, evolves binary
    keep/drop masks over its conv filters against the two objectives
    (training error, FLOPs), and fine-tunes the three retained solutions on
    the full data. Fitted attributes: ``knee_``, ``heavy_``, ``light_``
    (NetworkClassifier instances), ``trace_``, ``base_flops_``,
    ``results_``. ``predict`` delegates to the knee solution.
    """

    def __init__(self, arch="tiny_cnn", base_model=None, pretrain_epochs=10,
                 lambda_size=20, generations=10, p_m=0.1, e_eval=5, alpha_eval=0.1,
                 e_fine=50, alpha_fine=0.01, variant="plus", seed=0, batch_size=64,
                 subset_per_class=None, workers=1, dtype="float32"):
        self.arch = arch
        self.base_model = base_model
        self.pretrain_epochs = pretrain_epochs
        self.lambda_size = lambda_size
        self.generations = generations
        self.p_m = p_m
        self.e_eval = e_eval
        self.alpha_eval = alpha_eval
        self.e_fine = e_fine
        self.alpha_fine = alpha_fine
        self.variant = variant
        self.seed = seed
        self.batch_size = batch_size
        self.subset_per_class = subset_per_class
        self.workers = workers
        self.dtype = dtype

    def _config(self) -> ESConfig:
        return ESConfig(
            lambda_size=self.lambda_size, generations=self.generations, p_m=self.p_m,
            e_eval=self.e_eval, alpha_eval=self.alpha_eval, e_fine=self.e_fine,
            alpha_fine=self.alpha_fine, variant=self.variant, seed=self.seed,
            batch_size=self.batch_size, subset_per_class=self.subset_per_class,
            workers=self.workers)

    def fit(self, X, y):
        X = check_image_array(X, dtype=_DTYPES[self.dtype])
        y = check_labels(y, len(X))
        self.classes_ = np.unique(y)
        data = _as_dataset(X, y, self.classes_, len(self.classes_))

        if self.base_model is not None:
            base = self.base_model
            if isinstance(base, NetworkClassifier):
                base = base.model_
        else:
            arch = _resolve_arch(self.arch, len(self.classes_), X.shape[1:])
            base = init_model(arch, seed=self.seed, dtype=_DTYPES[self.dtype])
            if self.pretrain_epochs > 0:
                base = train(base, data, TrainConfig(
                    epochs=self.pretrain_epochs, learning_rate=self.alpha_eval,
                    batch_size=self.batch_size, seed=self.seed))
        if not isinstance(base, ModelInstance):
            raise ValueError("base_model must be a ModelInstance or fitted NetworkClassifier")

        result = run(base, data, self._config())
        self.base_flops_ = result.base_flops
        self.trace_ = result.trace
        self.results_ = {}
        for role in ("knee", "heavy", "light"):
            clf = NetworkClassifier(arch=result.models[role].arch, epochs=0,
                                    batch_size=self.batch_size, dtype=self.dtype,
                                    initial_model=result.models[role])
            clf.classes_ = self.classes_
            clf.model_ = result.models[role]
            setattr(self, f"{role}_", clf)
            ind = result.tri.roles()[role]
            self.results_[role] = {
                "f1": result.final_f1[role],
                "f2": ind.f2,
                "percent_pruned": 100.0 * (1.0 - ind.f2 / result.base_flops),
            }
        return self

    def predict(self, X):
        check_is_fitted(self, "knee_")
        return self.knee_.predict(X)

    def score(self, X, y):
        check_is_fitted(self, "knee_")
        return self.knee_.score(X, y)
