import struct

import numpy as np
import pytest
import torch

from robust_distill.attacks import AttackConfig
from robust_distill.evaluation import evaluate
from robust_distill.expert import (ATLossVariant, TrainingDivergedError, TrajectoryBuffer, at_loss,
                                   buffer_to_bytes, ema_update, load_buffer, save_buffer,
                                   train_expert, weight_variance, weight_variance_rows)
from robust_distill.fileio import (BadMagicError, dump_meta, LayoutMismatchError, TruncatedPayloadError,
                                   UnsupportedVersionError)
from robust_distill.models import ModelSpec, ParamVector, init_model

IDENTITY = ModelSpec.mlp(2, [], 2)


def identity_params():
    # logits == inputs
    return ParamVector(torch.tensor([1.0, 0.0, 0.0, 1.0, 0.0, 0.0], dtype=torch.float64),
                       IDENTITY.spec_hash)


def test_ema_update_cases():
    a, b = torch.tensor([1.0, -3.0]), torch.tensor([2.0, 5.0])
    assert torch.equal(ema_update(a, b, 0.0), b)
    assert torch.equal(ema_update(a, b, 1.0), a)
    out = ema_update(torch.tensor([1.0], dtype=torch.float64),
                     torch.tensor([2.0], dtype=torch.float64), 0.9)
    assert float(out) == pytest.approx(1.1, abs=1e-12)
    with pytest.raises(ValueError):
        ema_update(a, torch.zeros(3), 0.5)
    with pytest.raises(ValueError):
        ema_update(a, b, 1.5)


def test_ema_update_keeps_param_vector(mlp22):
    p = init_model(mlp22, 0)
    out = ema_update(p, p, 0.5)
    assert isinstance(out, ParamVector) and out.spec_hash == p.spec_hash


def test_loss_variants_reduce_to_clean_ce_when_unperturbed():
    x = torch.tensor([[0.2, 0.9], [0.7, 0.1]], dtype=torch.float64)
    y = torch.tensor([1, 0])
    p = identity_params()
    nat = at_loss(ATLossVariant("natural"), p, IDENTITY, x, x, y)
    assert float(nat) == pytest.approx(float(torch.nn.functional.cross_entropy(x, y)))
    assert float(at_loss(ATLossVariant("pgd-at"), p, IDENTITY, x, x, y)) == pytest.approx(float(nat))
    assert float(at_loss(ATLossVariant("trades", 6.0), p, IDENTITY, x, x, y)) == pytest.approx(float(nat))


def test_mart_and_trades_match_hand_evaluated_formula():
    # frozen values from a standalone math-module evaluation of the published formulas
    x = torch.tensor([[2.0, 0.5]], dtype=torch.float64)
    x_adv = torch.tensor([[0.3, 1.1]], dtype=torch.float64)
    y = torch.tensor([0])
    p = identity_params()
    mart = at_loss(ATLossVariant("mart", 6.0), p, IDENTITY, x, x_adv, y)
    trades = at_loss(ATLossVariant("trades", 6.0), p, IDENTITY, x, x_adv, y)
    assert float(mart) == pytest.approx(2.944324520006055, abs=1e-12)
    assert float(trades) == pytest.approx(3.5020653772451875, abs=1e-12)


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        ATLossVariant("fgsm-at")
    with pytest.raises(ValueError):
        ATLossVariant("trades", beta=0.0)


def _mlp_for(ds):
    return ModelSpec.mlp(ds.image_shape, [16], ds.num_classes)


def test_zero_epochs_holds_only_init(blobs_2c):
    train, _ = blobs_2c
    spec = _mlp_for(train)
    buf = train_expert(train.images, train.labels, spec, epochs=0, seed=4)
    assert buf.ema.shape == (1, spec.num_params)
    assert torch.equal(buf.ema[0], init_model(spec, 4).values)
    assert torch.equal(buf.raw[0], buf.ema[0])


def test_natural_alpha_zero_tracks_coincide_and_deterministic(blobs_2c):
    train, _ = blobs_2c
    spec = _mlp_for(train)
    kw = dict(variant=ATLossVariant("natural"), ema_decay=0.0, outer_lr=0.05, epochs=3,
              batch_size=32, seed=2)
    a = train_expert(train.images, train.labels, spec, **kw)
    b = train_expert(train.images, train.labels, spec, **kw)
    assert torch.equal(a.ema, a.raw)
    assert a.equals(b)
    assert len(a.snapshots_ema) == 4
    assert torch.equal(a.snapshots_ema[0].values, init_model(spec, 2).values)


def test_pgd_at_teacher_learns_blobs(blobs_2c):
    train, test = blobs_2c
    spec = _mlp_for(train)
    buf = train_expert(train.images, train.labels, spec, ATLossVariant("pgd-at"),
                       AttackConfig(4 / 255, 10), ema_decay=0.999, outer_lr=0.05, epochs=10,
                       batch_size=16, seed=0)
    acc = evaluate(buf.snapshot(10, "raw"), spec, test.images, test.labels)["standard_acc"]
    assert acc >= 0.9
    d_ema, d_raw = weight_variance(buf, "ema"), weight_variance(buf, "raw")
    assert d_ema.max() <= d_raw.max()


@pytest.mark.parametrize("kind", ["trades", "mart"])
def test_other_variants_train(blobs_2c, kind):
    train, _ = blobs_2c
    spec = _mlp_for(train)
    buf = train_expert(train.images[:64], train.labels[:64], spec, ATLossVariant(kind),
                       AttackConfig(4 / 255, 3), epochs=2, batch_size=16, seed=0)
    assert torch.isfinite(buf.ema).all() and buf.meta["loss_variant"] == kind


def test_divergence_reports_context(blobs_2c):
    train, _ = blobs_2c
    with pytest.raises(TrainingDivergedError, match="epoch"):
        train_expert(train.images, train.labels, _mlp_for(train), ATLossVariant("natural"),
                     outer_lr=1e38, epochs=3, batch_size=32)


def _buffer(rows, raw=None):
    spec = ModelSpec.mlp(1, [], 2)  # 4 params
    ema = torch.tensor(rows, dtype=torch.float32)
    return TrajectoryBuffer(spec, ema, None if raw is None else torch.tensor(raw, dtype=torch.float32),
                            {"seed": 0})


def test_weight_variance_examples():
    const = _buffer([[1.0, 2.0, 3.0, 4.0]] * 4)
    assert np.array_equal(weight_variance(const), np.zeros(3))
    step = _buffer([[0, 0, 0, 0], [3, 4, 0, 0]])
    assert weight_variance(step)[0] == 5.0
    with pytest.raises(ValueError):
        weight_variance(step, "raw")
    rows = weight_variance_rows(_buffer([[0] * 4, [3, 4, 0, 0]], raw=[[0] * 4, [0, 0, 0, 2]]))
    assert rows == [(1, 5.0, "ema"), (1, 2.0, "raw")]


def test_buffer_round_trip_and_payload_size(tmp_path, mlp22):
    spec = mlp22
    rng = torch.Generator().manual_seed(0)
    ema = torch.randn(3, 22, generator=rng)
    buf = TrajectoryBuffer(spec, ema, None, {"loss_variant": "pgd-at", "ema_decay": 0.999})
    blob = buffer_to_bytes(buf)
    spec_text = spec.to_string().encode()
    meta_len = len(dump_meta(dict(buf.meta, spec_hash=spec.spec_hash)))
    header = 4 + 4 + 2 + len(spec_text) + 4 + 8 + 1
    assert len(blob) == header + 3 * 22 * 4 + 4 + meta_len
    path = tmp_path / "b.matb"
    save_buffer(buf, path)
    assert load_buffer(path).equals(buf)

    with_raw = TrajectoryBuffer(spec, ema, ema * 2, buf.meta)
    assert len(buffer_to_bytes(with_raw)) == len(blob) + 3 * 22 * 4
    save_buffer(with_raw, path)
    assert load_buffer(path).equals(with_raw)


def test_buffer_corruption_categories(tmp_path, mlp22):
    buf = TrajectoryBuffer(mlp22, torch.zeros(2, 22), None, {})
    blob = buffer_to_bytes(buf)
    cases = {
        BadMagicError: b"XXXX" + blob[4:],
        UnsupportedVersionError: blob[:4] + struct.pack("<I", 9) + blob[8:],
        TruncatedPayloadError: blob[:-30],
    }
    spec_len = len(mlp22.to_string())
    count_at = 4 + 4 + 2 + spec_len + 4
    cases[LayoutMismatchError] = blob[:count_at] + struct.pack("<Q", 23) + blob[count_at + 8:]
    for err, data in cases.items():
        path = tmp_path / f"{err.__name__}.matb"
        path.write_bytes(data)
        with pytest.raises(err):
            load_buffer(path)
    with pytest.raises(BadMagicError, match="not a trajectory buffer"):
        (tmp_path / "m").write_bytes(b"MATS" + blob[4:])
        load_buffer(tmp_path / "m")
