import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from robust_distill.data import gen_blobs
from robust_distill.estimators import ExpertTrajectory, NaturalClassifier, TrajectoryDistiller
from robust_distill.models import ModelSpec


@pytest.fixture(scope="module")
def blobs():
    train, test = gen_blobs(2, 40, 6, 6, 0.05, seed=0, test_per_class=20)
    return train.images.numpy(), train.labels.numpy(), test.images.numpy(), test.labels.numpy()


def test_params_round_trip_through_clone():
    est = NaturalClassifier(epochs=7, lr=0.2, seed=3)
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    assert ExpertTrajectory(ema_decay=0.5).set_params(epochs=2).epochs == 2
    assert set(TrajectoryDistiller().get_params()) >= {"ipc", "iterations", "syn_lr", "seed"}


def test_natural_classifier_fit_predict_score(blobs):
    X, y, Xt, yt = blobs
    clf = NaturalClassifier(model="mlp:in=6x6x1,h=8,c=2", epochs=50, lr=0.1, batch_size=16).fit(X, y)
    assert clf.score(Xt, yt) >= 0.95
    proba = clf.predict_proba(Xt)
    assert proba.shape == (40, 2) and np.allclose(proba.sum(axis=1), 1, atol=1e-6)
    assert np.array_equal(proba.argmax(axis=1), clf.predict(Xt))
    robust = clf.robust_score(Xt, yt, epsilon=0.0)
    assert robust == clf.score(Xt, yt)
    assert 0.0 <= clf.robust_score(Xt, yt, epsilon=8 / 255, steps=1) <= 1.0
    adv = clf.perturb(Xt, yt, epsilon=4 / 255)
    assert np.abs(adv - Xt).max() <= 4 / 255 + 1e-6


def test_unfitted_estimators_raise(blobs):
    X = blobs[0]
    with pytest.raises(NotFittedError):
        NaturalClassifier().predict(X)
    with pytest.raises(NotFittedError):
        ExpertTrajectory().predict(X)


def test_expert_then_distiller(blobs):
    X, y, _, _ = blobs
    spec = ModelSpec.mlp((6, 6, 1), [8], 2)
    experts = [ExpertTrajectory(model=spec, epochs=4, batch_size=8, outer_lr=0.05, ema_decay=0.9,
                                seed=s).fit(X, y) for s in range(2)]
    assert experts[0].buffer_.epochs == 4 and experts[0].predict(X).shape == (80,)
    dist = TrajectoryDistiller(ipc=3, max_start_epoch=2, target_offset=2, max_student_steps=3,
                               iterations=4, inner_lr=0.05)
    images, labels = dist.fit_resample(X, y, buffers=[e.buffer_ for e in experts])
    assert images.shape == (6, 6, 6, 1) and labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert len(dist.history_) == 4 and images.min() >= 0 and images.max() <= 1
    with pytest.raises(ValueError):
        TrajectoryDistiller().fit(X, y, buffers=[])


def test_inputs_are_validated():
    with pytest.raises(ValueError):
        NaturalClassifier().fit(np.full((4, 3, 3, 1), 2.0), [0, 1, 0, 1])
    with pytest.raises(ValueError):
        NaturalClassifier().fit(np.zeros((4, 3, 3, 1)), [0, 1, 0])
