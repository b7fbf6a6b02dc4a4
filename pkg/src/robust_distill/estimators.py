"""scikit-learn style wrappers around the functional core.

The pipeline stages map onto estimators: an expert is ``fit`` on real data
and exposes its trajectory, the distiller is ``fit`` on real data plus expert
trajectories and ``fit_resample`` returns the synthetic set, and the natural
classifier is the evaluation model with a ``robust_score`` method.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_labels
from .attacks import AttackConfig, attack
from .distiller import MatchConfig, distill, init_synthetic
from .evaluation import EvalConfig, evaluate, natural_train
from .expert import ATLossVariant, train_expert
from .models import ModelSpec, forward


def _spec_for(model, images, num_classes) -> ModelSpec:
    if isinstance(model, ModelSpec):
        return model
    if isinstance(model, str):
        return ModelSpec.from_string(model)
    return ModelSpec.mlp(tuple(images.shape[1:]), [32], num_classes)


def _num_classes(y, declared):
    return int(declared) if declared is not None else int(y.max()) + 1


class ExpertTrajectory(BaseEstimator, ClassifierMixin):
    """Adversarially train one teacher and keep its per-epoch trajectory.

    ``model`` is a ``ModelSpec``, its string form, or None for a one-hidden-layer
    MLP. After ``fit``: ``buffer_`` (TrajectoryBuffer), ``spec_``, ``classes_``.
    """

    def __init__(self, model=None, variant="pgd-at", beta=6.0, epsilon=4 / 255, attack_steps=10,
                 ema_decay=0.999, outer_lr=0.01, epochs=20, batch_size=256, momentum=0.0,
                 num_classes=None, seed=0):
        self.model = model
        self.variant = variant
        self.beta = beta
        self.epsilon = epsilon
        self.attack_steps = attack_steps
        self.ema_decay = ema_decay
        self.outer_lr = outer_lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.num_classes = num_classes
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X)
        n_cls = _num_classes(check_labels(y, 2 ** 31), self.num_classes)
        y = check_labels(y, n_cls, len(X))
        self.spec_ = _spec_for(self.model, X, n_cls)
        self.classes_ = np.arange(n_cls)
        self.buffer_ = train_expert(X, y, self.spec_, ATLossVariant(self.variant, self.beta),
                                    AttackConfig(self.epsilon, self.attack_steps), self.ema_decay,
                                    self.outer_lr, self.epochs, self.batch_size, self.seed,
                                    self.momentum)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "buffer_")
        X = check_images(X, shape=self.spec_.input_shape)
        with torch.no_grad():
            return forward(self.buffer_.snapshot(self.buffer_.epochs), self.spec_, X).numpy()

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)


class TrajectoryDistiller(BaseEstimator):
    """Learn a synthetic set by matching expert trajectories.

    ``fit(X, y, buffers=...)`` takes the real data (used for initialization)
    and a list of TrajectoryBuffer objects; ``fit_resample`` also returns the
    synthetic images and labels.
    """

    def __init__(self, ipc=10, init="real", inner_lr=0.01, max_start_epoch=10, target_offset=2,
                 max_student_steps=20, syn_lr=100.0, lr_lr=1e-5, iterations=500,
                 image_momentum=0.5, start_track="ema", target_track="ema", seed=0):
        self.ipc = ipc
        self.init = init
        self.inner_lr = inner_lr
        self.max_start_epoch = max_start_epoch
        self.target_offset = target_offset
        self.max_student_steps = max_student_steps
        self.syn_lr = syn_lr
        self.lr_lr = lr_lr
        self.iterations = iterations
        self.image_momentum = image_momentum
        self.start_track = start_track
        self.target_track = target_track
        self.seed = seed

    def _match_config(self) -> MatchConfig:
        return MatchConfig(max_start_epoch=self.max_start_epoch, target_offset=self.target_offset,
                           max_student_steps=self.max_student_steps, syn_lr=self.syn_lr,
                           lr_lr=self.lr_lr, iterations=self.iterations,
                           image_momentum=self.image_momentum, start_track=self.start_track,
                           target_track=self.target_track)

    def fit(self, X, y, buffers=None):
        if not buffers:
            raise ValueError("TrajectoryDistiller.fit needs at least one expert buffer")
        spec = buffers[0].spec
        X = check_images(X, shape=spec.input_shape)
        y = check_labels(y, spec.num_classes, len(X))
        S = init_synthetic(X, y, spec.num_classes, self.ipc, self.init, seed=self.seed,
                           inner_lr=self.inner_lr)
        self.synthetic_, self.history_ = distill(S, list(buffers), self._match_config(),
                                                 seed=self.seed)
        self.spec_ = spec
        return self

    def fit_resample(self, X, y, buffers=None):
        self.fit(X, y, buffers)
        return self.synthetic_.images.numpy(), self.synthetic_.labels.numpy()


class NaturalClassifier(BaseEstimator, ClassifierMixin):
    """Plain SGD-with-momentum classifier; the model evaluated on distilled sets."""

    def __init__(self, model=None, epochs=500, lr=0.01, momentum=0.9, batch_size=256,
                 num_classes=None, seed=0):
        self.model = model
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.num_classes = num_classes
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X)
        n_cls = _num_classes(check_labels(y, 2 ** 31), self.num_classes)
        y = check_labels(y, n_cls, len(X))
        self.spec_ = _spec_for(self.model, X, n_cls)
        self.classes_ = np.arange(n_cls)
        cfg = EvalConfig(self.spec_, epochs=self.epochs, lr=self.lr, momentum=self.momentum,
                         seeds=[self.seed], attacks=[], batch_size=self.batch_size)
        self.params_ = natural_train(X, y, cfg, self.seed)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, shape=self.spec_.input_shape)
        with torch.no_grad():
            return forward(self.params_, self.spec_, X).numpy()

    def predict_proba(self, X):
        return torch.softmax(torch.from_numpy(self.decision_function(X)), dim=1).numpy()

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)

    def perturb(self, X, y, epsilon=4 / 255, steps=10, seed=0):
        """Adversarial versions of ``X`` against the fitted model."""
        check_is_fitted(self, "params_")
        X = check_images(X, shape=self.spec_.input_shape)
        y = check_labels(y, self.spec_.num_classes, len(X))
        cfg = AttackConfig(epsilon, steps) if steps > 1 else AttackConfig.fgsm(epsilon)
        gen = torch.Generator().manual_seed(int(seed))
        return attack(self.params_, self.spec_, X, y, cfg, generator=gen).numpy()

    def robust_score(self, X, y, epsilon=4 / 255, steps=10, seed=0):
        """Accuracy under an L-infinity attack (PGD, or FGSM when ``steps`` is 1)."""
        check_is_fitted(self, "params_")
        cfg = AttackConfig(epsilon, steps) if steps > 1 else AttackConfig.fgsm(epsilon)
        return evaluate(self.params_, self.spec_, X, y, [("attack", cfg)], seed=seed)["adv_acc/attack"]
