import struct

import numpy as np
import pytest
import torch

from robust_distill.data import (RawDataset, gen_blobs, import_directory, load_raw, raw_to_bytes,
                                 save_raw)
from robust_distill.evaluation import EvalConfig, natural_train, predict
from robust_distill.fileio import (BadMagicError, LayoutMismatchError, TruncatedPayloadError,
                                   UnsupportedVersionError, dump_meta)
from robust_distill.models import ModelSpec


def test_zero_sigma_makes_each_class_constant():
    train, test = gen_blobs(3, 10, 6, 6, 0.0, seed=4)
    for ds in (train, test):
        for c in range(3):
            block = ds.images[ds.labels == c]
            assert torch.equal(block, block[:1].expand_as(block))
    assert not torch.equal(train.images[0], train.images[10])


def test_same_seed_gives_bit_identical_data():
    a, _ = gen_blobs(2, 100, 8, 8, 0.05, seed=1)
    b, _ = gen_blobs(2, 100, 8, 8, 0.05, seed=1)
    c, _ = gen_blobs(2, 100, 8, 8, 0.05, seed=2)
    assert torch.equal(a.images, b.images) and a.digest == b.digest
    assert a.digest != c.digest


def test_pixels_and_split_sizes():
    train, test = gen_blobs(4, 7, 5, 9, 0.3, seed=0, channels=2, test_per_class=3)
    assert train.images.shape == (28, 5, 9, 2) and test.images.shape == (12, 5, 9, 2)
    assert 0.0 <= float(train.images.min()) and float(train.images.max()) <= 1.0
    assert train.class_counts() == [7] * 4 and test.split == "test"


@pytest.mark.parametrize("kwargs", [dict(sigma=-0.1), dict(num_classes=1), dict(per_class=0),
                                    dict(height=0), dict(bump_flip=1.5)])
def test_invalid_generator_arguments(kwargs):
    args = dict(num_classes=2, per_class=5, height=4, width=4, sigma=0.1)
    args.update(kwargs)
    with pytest.raises(ValueError):
        gen_blobs(**args)


def test_tiny_mlp_separates_two_pixel_blobs():
    # Two-pixel blobs are the only layout a 22-parameter MLP (2-4-2) can read.
    train, test = gen_blobs(2, 100, 1, 2, 0.05, seed=1)
    spec = ModelSpec.mlp((1, 2, 1), [4], 2)
    assert spec.num_params == 22
    params = natural_train(train.images, train.labels,
                           EvalConfig(spec, epochs=100, lr=0.1, attacks=[], batch_size=32), seed=0)
    acc = float((predict(params, spec, test.images) == test.labels).double().mean())
    assert acc >= 0.95


def test_bump_flip_moves_bumps_but_keeps_labels():
    clean, _ = gen_blobs(4, 200, 8, 8, 0.0, seed=0)
    flipped, _ = gen_blobs(4, 200, 8, 8, 0.0, seed=0, bump_flip=0.25)
    assert torch.equal(clean.labels, flipped.labels)
    moved = (clean.images != flipped.images).flatten(1).any(dim=1).double().mean()
    assert 0.18 < float(moved) < 0.32


def test_matx_round_trip_is_bit_exact(tmp_path):
    train, _ = gen_blobs(2, 6, 4, 3, 0.1, seed=0, channels=2)
    save_raw(train, tmp_path / "a.matx")
    back = load_raw(tmp_path / "a.matx")
    assert torch.equal(back.images, train.images) and torch.equal(back.labels, train.labels)
    assert back.meta == train.meta and back.split == "train" and back.num_classes == 2
    assert raw_to_bytes(back) == raw_to_bytes(train)


def test_matx_payload_size_arithmetic():
    train, _ = gen_blobs(3, 5, 4, 6, 0.1, seed=0)
    n, h, w, c = 15, 4, 6, 1
    meta = dump_meta(dict(train.meta, split="train", digest=train.digest))
    header = 4 + 4 + struct.calcsize("<5IB")
    assert len(raw_to_bytes(train)) == header + 4 * n * h * w * c + 4 * n + 4 + len(meta)


def test_matx_errors_have_distinct_categories(tmp_path):
    train, _ = gen_blobs(2, 4, 3, 3, 0.1, seed=0)
    blob = raw_to_bytes(train)
    cases = {"magic": (b"XXXX" + blob[4:], BadMagicError, "bad-magic"),
             "version": (blob[:4] + struct.pack("<I", 9) + blob[8:], UnsupportedVersionError,
                         "unsupported-version"),
             "short": (blob[:-7], TruncatedPayloadError, "truncated-payload")}
    for name, (data, err, category) in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(err) as info:
            load_raw(tmp_path / name)
        assert info.value.category == category
    # flip one pixel: layout intact, recorded digest no longer matches
    tampered = bytearray(blob)
    tampered[4 + 4 + struct.calcsize("<5IB")] ^= 1
    (tmp_path / "bits").write_bytes(bytes(tampered))
    with pytest.raises(LayoutMismatchError):
        load_raw(tmp_path / "bits")


def test_raw_dataset_validates_inputs():
    with pytest.raises(ValueError):
        RawDataset(torch.full((2, 3, 3, 1), 1.5), torch.tensor([0, 1]), 2)
    with pytest.raises(ValueError):
        RawDataset(torch.zeros(2, 3, 3, 1), torch.tensor([0, 2]), 2)
    with pytest.raises(ValueError):
        RawDataset(torch.zeros(2, 3, 3, 1), torch.tensor([0, 1]), 2, split="val")


def test_import_directory_layouts(tmp_path):
    rng = np.random.default_rng(0)
    per_file = tmp_path / "files"
    for k in range(2):
        (per_file / str(k)).mkdir(parents=True)
        for i in range(3):
            np.save(per_file / str(k) / f"{i}.npy", rng.integers(0, 256, (4, 4), dtype=np.uint8))
    ds = import_directory(per_file)
    assert ds.images.shape == (6, 4, 4, 1) and ds.labels.tolist() == [0, 0, 0, 1, 1, 1]
    first = np.load(per_file / "0" / "0.npy") / 255.0
    assert np.allclose(ds.images[0, ..., 0].numpy(), first, atol=1e-7)

    stacked = tmp_path / "stacked"
    stacked.mkdir()
    np.save(stacked / "0.npy", rng.random((2, 5, 5, 3)).astype(np.float32))
    np.save(stacked / "1.npy", rng.random((4, 5, 5, 3)).astype(np.float32))
    ds = import_directory(stacked, split="test")
    assert ds.images.shape == (6, 5, 5, 3) and ds.class_counts() == [2, 4] and ds.split == "test"

    with pytest.raises(ValueError):
        import_directory(tmp_path / "stacked" / ".." / "files" / "0")
