import pytest
import torch

from robust_distill.attacks import AttackConfig
from robust_distill.evaluation import (EvalConfig, EvalError, EvalReport, aggregate, evaluate,
                                       natural_train, predict, run_eval)
from robust_distill.models import ModelSpec, ParamVector, init_model


@pytest.fixture(scope="module")
def small_setup(blobs_2c):
    train, test = blobs_2c
    spec = ModelSpec.mlp(train.image_shape, [8], 2)
    S_x = torch.cat([train.images[:5], train.images[100:105]])
    S_y = torch.cat([train.labels[:5], train.labels[100:105]])
    return spec, S_x, S_y, test


def test_zero_lr_returns_init(small_setup):
    spec, x, y, _ = small_setup
    cfg = EvalConfig(spec, epochs=1, lr=0.0, seeds=[3], attacks=[])
    assert torch.equal(natural_train(x, y, cfg, 3).values, init_model(spec, 3).values)


def test_separable_set_is_fit_and_training_is_deterministic(small_setup):
    spec, x, y, _ = small_setup
    cfg = EvalConfig(spec, epochs=200, lr=0.01, seeds=[0], attacks=[])
    p = natural_train(x, y, cfg, 0)
    assert torch.equal(predict(p, spec, x), y)
    assert torch.equal(p.values, natural_train(x, y, cfg, 0).values)


def test_minibatched_training_runs(small_setup):
    spec, x, y, _ = small_setup
    cfg = EvalConfig(spec, epochs=3, lr=0.01, seeds=[0], attacks=[], batch_size=4)
    a, b = natural_train(x, y, cfg, 0), natural_train(x, y, cfg, 0)
    assert torch.equal(a.values, b.values)


def test_zero_radius_attack_equals_standard(small_setup):
    spec, x, y, test = small_setup
    p = init_model(spec, 0)
    m = evaluate(p, spec, test.images, test.labels,
                 [("pgd0", AttackConfig(0.0, 10)), ("fgsm0", AttackConfig.fgsm(0.0))])
    assert m["adv_acc/pgd0"] == m["standard_acc"] == m["adv_acc/fgsm0"]


def test_linear_classifier_certified_margin(blobs_2c):
    _, test = blobs_2c
    spec = ModelSpec.mlp(test.image_shape, [], 2)
    x = test.images.reshape(len(test), -1).double()
    t0, t1 = x[test.labels == 0].mean(0), x[test.labels == 1].mean(0)
    w = t1 - t0
    b = -float(w @ (t0 + t1)) / 2
    diff = x @ w + b
    signed = torch.where(test.labels == 1, diff, -diff)
    assert signed.min() > 0
    # |change in logit gap| <= eps * ||w||_1, so eps below margin / ||w||_1 cannot flip anything
    eps = 0.9 * float(signed.min()) / float(w.abs().sum())
    # logits = [0, w.x + b]
    values = torch.cat([torch.zeros_like(w), w, torch.tensor([0.0, b], dtype=torch.float64)])
    order = values.new_empty(spec.num_params)
    n = w.numel()
    order[:n] = 0.0
    order[n:2 * n] = w
    order[2 * n:] = torch.tensor([0.0, b])
    p = ParamVector(order, spec.spec_hash)
    m = evaluate(p, spec, test.images, test.labels,
                 [("pgd", AttackConfig(eps, 20, random_start=True)), ("fgsm", AttackConfig.fgsm(eps))])
    assert m["standard_acc"] == 1.0 and m["adv_acc/pgd"] == 1.0 and m["adv_acc/fgsm"] == 1.0


def test_constant_logits_tie_break():
    spec = ModelSpec.mlp(3, [], 2)
    p = ParamVector(torch.zeros(spec.num_params), spec.spec_hash)
    x = torch.rand(10, 3)
    y = torch.tensor([0, 1] * 5)
    assert evaluate(p, spec, x, y)["standard_acc"] == 0.5
    assert torch.all(predict(p, spec, x) == 0)


def test_empty_test_set_rejected(mlp22):
    with pytest.raises(ValueError):
        evaluate(init_model(mlp22, 0), mlp22, torch.zeros(0, 2), torch.zeros(0, dtype=torch.long))


def test_chunk_size_invariance(small_setup):
    spec, x, y, test = small_setup
    cfg = EvalConfig(spec, epochs=30, seeds=[0], attacks=[])
    p = natural_train(x, y, cfg, 0)
    attacks = [("pgd", AttackConfig(8 / 255, 5))]
    results = [evaluate(p, spec, test.images, test.labels, attacks, chunk_size=c, seed=1)
               for c in (7, 64, 1000)]
    assert results[0] == results[1] == results[2]


def test_run_eval_same_seed_has_zero_std(small_setup):
    spec, x, y, test = small_setup
    cfg = EvalConfig(spec, epochs=20, seeds=[0, 0, 0], attacks=[("pgd", AttackConfig(4 / 255, 3))])
    report = run_eval(x, y, test.images, test.labels, cfg, synthetic_digest="abc")
    for stats in report.aggregate.values():
        assert stats["std"] == 0.0


def test_run_eval_aggregate_is_recomputable(small_setup, tmp_path):
    spec, x, y, test = small_setup
    cfg = EvalConfig(spec, epochs=20, seeds=[0, 1, 2], attacks=[("pgd", AttackConfig(4 / 255, 3))])
    report = run_eval(x, y, test.images, test.labels, cfg, synthetic_digest="d" * 64)
    for name in ("standard_acc", "adv_acc/pgd"):
        vals = [r[name] for r in report.per_seed]
        assert report.aggregate[name]["mean"] == pytest.approx(sum(vals) / 3, abs=1e-12)
        assert all(0 <= v <= 1 for v in vals)
    shuffled = aggregate(report.per_seed[::-1])
    for name in shuffled:
        assert shuffled[name]["mean"] == pytest.approx(report.aggregate[name]["mean"], abs=1e-15)
    json_path, csv_path = report.write(tmp_path, "d" * 64)
    assert "dddddddd" in json_path.name
    again = EvalReport.from_dict(__import__("json").loads(json_path.read_text()))
    assert again.aggregate == report.aggregate
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "seed,metric,value" and len(lines) == 1 + 3 * 2


def test_seed_failures_are_attributed(small_setup):
    spec, x, y, test = small_setup
    cfg = EvalConfig(spec, epochs=2, lr=1e38, seeds=[4], attacks=[])
    with pytest.raises(EvalError, match="seed 4"):
        run_eval(x, y, test.images, test.labels, cfg)


def test_eval_config_validation(mlp22):
    with pytest.raises(ValueError):
        EvalConfig(mlp22, epochs=0)
    with pytest.raises(ValueError):
        EvalConfig(mlp22, seeds=[])
