"""Dataset ingestion, desk-scale training, and the artifact container."""

import os
import struct

import numpy as np
import pytest
import torch
from PIL import Image

from classgen import ConfigError, ModelStoreError
from classgen import zoo
from classgen.masking import sample_mask, stack_pixel_masks, derive_rng
from classgen.zoo import (ImageDataset, TrainConfig, build_reconstruction,
                          load_dataset, load_idx_dir, load_image_folder,
                          split_dataset)
from classgen.zoo.train import (HOLDOUT_FRACTION, masked_reconstruction_loss,
                                probe_batch_and_masks, train_classifier,
                                train_dual_encoder, train_masked_autoencoder)


# ---------------------------------------------------------------- datasets

def test_digits28_shape_and_range(dataset):
    assert dataset.images.shape == (1797, 1, 28, 28)
    assert dataset.num_classes == 10 and dataset.channels == 1
    assert 0.0 <= dataset.images.min() and dataset.images.max() <= 1.0
    assert sorted(set(dataset.labels.tolist())) == list(range(10))


def test_split_deterministic_and_disjoint(dataset):
    t1, h1 = split_dataset(dataset, 0.15, 7)
    t2, h2 = split_dataset(dataset, 0.15, 7)
    assert np.array_equal(h1.labels, h2.labels)
    assert len(t1) + len(h1) == len(dataset)
    assert np.array_equal(np.sort(np.concatenate([t1.labels, h1.labels])),
                          np.sort(dataset.labels))
    with pytest.raises(ConfigError):
        split_dataset(dataset, 1.5, 0)


def _write_idx(tmp_path, images, labels, prefix="train"):
    with open(tmp_path / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">iiii", 0x0803, *images.shape))
        f.write(images.tobytes())
    with open(tmp_path / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">ii", 0x0801, labels.shape[0]))
        f.write(labels.tobytes())


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=5, dtype=np.uint8)
    _write_idx(tmp_path, images, labels)
    ds = load_idx_dir(str(tmp_path))
    assert ds.images.shape == (5, 1, 28, 28)
    assert np.array_equal(ds.labels, labels)
    assert np.array_equal((ds.images[:, 0] * 255).round().astype(np.uint8), images)


def test_idx_truncated_rejected(tmp_path):
    images = np.zeros((5, 28, 28), dtype=np.uint8)
    labels = np.zeros(5, dtype=np.uint8)
    _write_idx(tmp_path, images, labels)
    path = tmp_path / "train-images-idx3-ubyte"
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ConfigError, match="truncated"):
        load_idx_dir(str(tmp_path))


def test_image_folder_loader(tmp_path):
    for cls, value in (("cats", 40), ("dogs", 200)):
        os.makedirs(tmp_path / cls)
        for i in range(2):
            Image.fromarray(np.full((8, 8), value, dtype=np.uint8)).save(
                tmp_path / cls / f"{i}.png")
    ds = load_image_folder(str(tmp_path))
    assert ds.class_names == ["cats", "dogs"]
    assert np.array_equal(ds.labels, [0, 0, 1, 1])
    assert abs(ds.images[0].mean() - 40 / 255) < 1e-12


def test_load_dataset_resolver(tmp_path):
    with pytest.raises(ConfigError):
        load_dataset("no-such-dataset")
    assert load_dataset("digits28").num_classes == 10


def test_image_dataset_validation():
    with pytest.raises(ConfigError):
        ImageDataset(np.full((2, 1, 4, 4), 2.0), np.zeros(2, dtype=np.int64), ["a"])
    with pytest.raises(Exception):
        ImageDataset(np.zeros((2, 4, 4)), np.zeros(2, dtype=np.int64), ["a"])


# ---------------------------------------------------------------- training

def _toy_dataset(n=40, seed=0):
    rng = np.random.default_rng(seed)
    # two visually distinct classes: bright top half vs bright bottom half
    images = rng.random((n, 1, 8, 8)) * 0.2
    labels = np.arange(n) % 2
    images[labels == 0, :, :4, :] += 0.7
    images[labels == 1, :, 4:, :] += 0.7
    return ImageDataset(np.clip(images, 0, 1), labels, ["top", "bottom"])


def test_train_classifier_loss_decreases():
    ds = _toy_dataset()
    model, report = train_classifier(ds, TrainConfig(epochs=3, batch_size=8,
                                                     seed=0, dataset="toy"))
    assert report["epochs"][-1]["loss"] < report["epochs"][0]["loss"]


def test_train_classifier_deterministic():
    ds = _toy_dataset()
    cfg = TrainConfig(epochs=2, batch_size=8, seed=5, dataset="toy")
    m1, _ = train_classifier(ds, cfg)
    m2, _ = train_classifier(ds, cfg)
    s1, s2 = m1.state_dict(), m2.state_dict()
    assert all(torch.equal(s1[k], s2[k]) for k in s1)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ConfigError):
        train_classifier(_toy_dataset(), TrainConfig(preset="resnet50"))


def test_conv_classifier_meets_accuracy_floor(conv_clf_art):
    _, container = conv_clf_art
    report = container["report"]
    assert report["holdout_accuracy"] >= report["accuracy_floor"] == 0.97
    assert report["passed"]


def test_attention_classifier_meets_accuracy_floor(attn_clf_art):
    _, container = attn_clf_art
    report = container["report"]
    assert report["holdout_accuracy"] >= report["accuracy_floor"] == 0.90


def test_masked_loss_ratio_zero_is_exactly_zero():
    module = build_reconstruction()
    images = torch.rand(3, 1, 8, 8, dtype=torch.float64)
    masks = stack_pixel_masks(
        [sample_mask(4, 4, 0.0, derive_rng(0, i, 0)) for i in range(3)])
    assert float(masked_reconstruction_loss(module, images, masks)) == 0.0


def test_autoencoder_on_constant_images():
    images = np.full((30, 1, 8, 8), 0.5)
    ds = ImageDataset(images, np.zeros(30, dtype=np.int64), ["only"])
    cfg = TrainConfig(epochs=40, batch_size=8, lr=5e-3, seed=0, dataset="toy")
    _, report = train_masked_autoencoder(ds, cfg, mask_ratio=0.75)
    assert report["holdout_error"] < 1e-3


def test_trained_autoencoder_beats_untrained_baseline(mae_art):
    _, container = mae_art
    report = container["report"]
    assert report["holdout_error"] <= 0.5 * report["untrained_holdout_error"]
    assert report["passed"]


def test_dual_encoder_separable_toy_set():
    ds = _toy_dataset()
    (img_enc, txt_enc), report = train_dual_encoder(
        ds, TrainConfig(epochs=20, batch_size=8, seed=0, dataset="toy"))
    assert report["holdout_retrieval_top1"] == 1.0


def test_dual_encoder_meets_retrieval_floor(dual_art):
    _, container = dual_art
    assert container["report"]["holdout_retrieval_top1"] >= 0.90


def test_text_encoder_rejects_unknown_prompt(dual_art):
    (_, txt_enc), _ = dual_art
    with pytest.raises(ConfigError):
        txt_enc.encode(["xylophone quartz"])


# ---------------------------------------------------------------- store

def test_classifier_store_round_trip(tmp_path, dataset, conv_clf_art):
    model, container = conv_clf_art
    path = str(tmp_path / "clf.pt")
    zoo.save_classifier(model, path, "small-convolutional", container["report"])
    loaded = zoo.load_classifier(path)
    probe = torch.from_numpy(dataset.images[:8])
    with torch.no_grad():
        assert torch.equal(loaded.logits(probe), model.logits(probe))


def test_loaded_classifier_replays_reported_accuracy(dataset, conv_clf_art):
    model, container = conv_clf_art
    _, holdout = split_dataset(dataset, HOLDOUT_FRACTION, 0)
    acc = zoo.evaluate_accuracy(model, holdout.images, holdout.labels)
    assert acc == container["report"]["holdout_accuracy"]


def test_reconstruction_store_round_trip(tmp_path, mae_art):
    module, container = mae_art
    path = str(tmp_path / "mae.pt")
    zoo.save_reconstruction(module, path, container["report"])
    loaded = zoo.load_reconstruction(path)
    x = torch.rand(2, 1, 28, 28, dtype=torch.float64)
    masks = stack_pixel_masks(
        [sample_mask(14, 14, 0.75, derive_rng(0, i, 0)) for i in range(2)])
    with torch.no_grad():
        assert torch.equal(loaded.reconstruct(x, masks), module.reconstruct(x, masks))


def test_dual_encoder_store_round_trip(tmp_path, dataset, dual_art):
    (img_enc, txt_enc), container = dual_art
    path = str(tmp_path / "dual.pt")
    zoo.save_dual_encoder(img_enc, txt_enc, path, container["report"],
                          dataset.class_names)
    (li, lt), data = zoo.load_dual_encoder(path), zoo.load_model(path)[1]
    probe = torch.from_numpy(dataset.images[:4])
    with torch.no_grad():
        assert torch.equal(li(probe), img_enc(probe))
        assert torch.equal(lt.encode(["three"]), txt_enc.encode(["three"]))
    assert data["meta"]["class_names"] == dataset.class_names


def test_truncated_container_rejected(tmp_path, conv_clf_art):
    model, container = conv_clf_art
    path = tmp_path / "clf.pt"
    zoo.save_classifier(model, str(path), "small-convolutional", container["report"])
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(ModelStoreError):
        zoo.load_model(str(path))


def test_wrong_kind_rejected_by_typed_loader(tmp_path, conv_clf_art):
    model, container = conv_clf_art
    path = str(tmp_path / "clf.pt")
    zoo.save_classifier(model, path, "small-convolutional", container["report"])
    with pytest.raises(ModelStoreError, match="expected a reconstruction"):
        zoo.load_reconstruction(path)


def test_non_container_file_rejected(tmp_path):
    path = tmp_path / "junk.pt"
    torch.save({"weights": 1}, str(path))
    with pytest.raises(ModelStoreError):
        zoo.load_model(str(path))
