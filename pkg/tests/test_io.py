import dataclasses
import os

import numpy as np
import pytest

from esdnet.branches import TopologyConfig, build_ensemble, prune_to_main
from esdnet.checkpoint import MAGIC, load_checkpoint, restore_optimizer, restore_rng, save_checkpoint
from esdnet.config import RunConfig, dump_config, load_config, save_config
from esdnet.data import (
    CIFAR_RECORD,
    find_cifar10,
    first_k_per_class,
    gen_synthetic,
    load_cifar10,
    normalize_pixels,
    parse_cifar10_bytes,
    read_cifar10_file,
    serialize_cifar10,
)
from esdnet.errors import CheckpointError, ConfigError, DataError
from esdnet.metrics import HEADER, emit_metrics, read_metrics
from esdnet.nn import get_preset
from esdnet.tensor import Tensor, no_grad
from esdnet.training import EpochMetrics, TrainConfig, predict_logits, train

# -- CIFAR-10 binary format -------------------------------------------------------


def _records(n, seed=0):
    r = np.random.default_rng(seed)
    return r.integers(0, 10, n).astype(np.uint8), r.integers(0, 256, (n, 3, 32, 32)).astype(np.uint8)


def test_ten_records_give_ten_samples(tmp_path):
    labels, pixels = _records(10)
    f = tmp_path / "b.bin"
    f.write_bytes(serialize_cifar10(labels, pixels))
    got_labels, got_pixels = read_cifar10_file(f)
    assert got_labels.shape == (10,) and got_pixels.shape == (10, 3, 32, 32)
    assert f.stat().st_size == 10 * CIFAR_RECORD


def test_hand_crafted_record_label_seven_all_white():
    raw = bytes([7]) + bytes([255]) * 3072
    labels, pixels = parse_cifar10_bytes(raw)
    assert labels.tolist() == [7]
    scaled = normalize_pixels(pixels, mean=(0, 0, 0), std=(1, 1, 1))
    assert np.all(scaled == 1.0)


def test_plane_order_is_red_green_blue_row_major():
    raw = bytearray([3]) + bytearray(3072)
    raw[1 + 0 * 1024 + 0] = 11  # red (0, 0)
    raw[1 + 1 * 1024 + 32 + 2] = 22  # green (1, 2)
    raw[1 + 2 * 1024 + 1023] = 33  # blue (31, 31)
    _, px = parse_cifar10_bytes(bytes(raw))
    assert px[0, 0, 0, 0] == 11 and px[0, 1, 1, 2] == 22 and px[0, 2, 31, 31] == 33
    assert int(px.sum()) == 66


def test_parse_serialize_round_trip_bytes():
    raw = serialize_cifar10(*_records(7, seed=3))
    assert serialize_cifar10(*parse_cifar10_bytes(raw)) == raw


def test_truncated_file_reports_offset():
    raw = serialize_cifar10(*_records(3))[:-100]
    with pytest.raises(DataError, match=f"byte offset {2 * CIFAR_RECORD}"):
        parse_cifar10_bytes(raw)


def test_bad_label_reports_offset():
    labels, pixels = _records(4)
    labels[2] = 10
    with pytest.raises(DataError, match=f"label 10 >= 10 at byte offset {2 * CIFAR_RECORD}"):
        parse_cifar10_bytes(serialize_cifar10(labels, pixels))


def test_first_k_per_class_is_deterministic_file_order():
    labels = np.array([3, 1, 3, 0, 1, 3, 0, 2])
    idx = first_k_per_class(labels, 2, num_classes=4)
    assert idx.tolist() == [0, 1, 2, 3, 4, 6, 7]


def test_load_cifar10_directory(fake_cifar):
    train_set, test_set = load_cifar10(fake_cifar)
    assert len(train_set) == 100 and len(test_set) == 20
    assert train_set.images.shape[1:] == (3, 32, 32) and train_set.images.dtype == np.float32
    small, small_test = load_cifar10(fake_cifar, subset=3, test_subset=1)
    assert np.bincount(small.labels, minlength=10).tolist() == [3] * 10
    assert np.bincount(small_test.labels, minlength=10).tolist() == [1] * 10
    again, _ = load_cifar10(fake_cifar, subset=3, test_subset=1)
    assert np.array_equal(small.images, again.images)


def test_load_cifar10_missing_directory(tmp_path):
    with pytest.raises(DataError):
        load_cifar10(tmp_path)


def test_find_cifar10_env(fake_cifar, monkeypatch, tmp_path):
    monkeypatch.setenv("ESDNET_CIFAR10_DIR", str(fake_cifar))
    assert find_cifar10() == fake_cifar
    monkeypatch.setenv("ESDNET_CIFAR10_DIR", str(tmp_path))
    monkeypatch.chdir(tmp_path)
    assert find_cifar10() is None


# -- synthetic ---------------------------------------------------------------------


def test_synthetic_same_seed_same_data():
    a, b = gen_synthetic(4, 5, 8, seed=11), gen_synthetic(4, 5, 8, seed=11)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, gen_synthetic(4, 5, 8, seed=12).images)


def test_synthetic_exact_class_histogram():
    d = gen_synthetic(7, 9, 8, seed=0)
    assert np.bincount(d.labels).tolist() == [9] * 7


def test_synthetic_needs_two_classes():
    with pytest.raises(ConfigError):
        gen_synthetic(1, 5)


# -- config --------------------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = RunConfig.from_dict({
        "backbone": "tiny",
        "topology": {"variant": "v2", "split_points": [1], "attention": ["se", "cam"]},
        "train": {"epochs": 3, "lr_drop_epochs": [2], "loss_weights": {"beta": 0.5, "lam": 0.1}},
        "data": {"kind": "synthetic", "num_classes": 3},
    })
    path = tmp_path / "c.yaml"
    save_config(cfg, path)
    assert load_config(path) == cfg
    assert load_config(path).to_dict() == cfg.to_dict()


def test_config_defaults():
    cfg = RunConfig.from_dict({})
    assert cfg == RunConfig()
    assert cfg.train.batch_size == 128 and cfg.train.base_lr == 0.1 and cfg.train.momentum == 0.9
    assert cfg.train.weight_decay == 0.0
    w = cfg.train.loss_weights
    assert (w.beta, w.lam) == (1.0, 1.0)
    assert "unknown" not in dump_config(cfg)


@pytest.mark.parametrize("doc,key", [
    ({"bakcbone": "tiny"}, "bakcbone"),
    ({"train": {"lr": 0.1}}, "train.lr"),
    ({"train": {"loss_weights": {"gamma": 1}}}, "train.loss_weights.gamma"),
    ({"data": {"kind": "synthetic", "colour": 1}}, "data.colour"),
])
def test_config_unknown_keys_rejected(doc, key):
    with pytest.raises(ConfigError, match=f"unknown config key {key}"):
        RunConfig.from_dict(doc)


def test_config_bad_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("train: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("- a list\n")
    with pytest.raises(ConfigError):
        load_config(p)


# -- checkpoint --------------------------------------------------------------------


SPEC = dataclasses.replace(get_preset("tiny", 3), image_size=16)


def _trained(topo=TopologyConfig("v1", None, ["se"])):
    rng = np.random.default_rng(0)
    data = gen_synthetic(3, 4, 16, seed=0)
    model = build_ensemble(SPEC, topo, rng)
    res = train(model, data, TrainConfig(epochs=1, batch_size=4, base_lr=0.05), rng=rng)
    return model, res, data


def test_checkpoint_round_trip_bit_identical(tmp_path):
    model, res, data = _trained()
    path = tmp_path / "m.esd"
    save_checkpoint(path, model, {"backbone": "tiny"}, res.optimizer, res.rng, epoch=1)
    assert path.read_bytes().startswith(MAGIC)
    ck = load_checkpoint(path)
    assert ck.epoch == 1 and ck.run_config == {"backbone": "tiny"}
    for branch in ("main", "ensemble"):
        assert np.array_equal(predict_logits(model, data.images, branch), predict_logits(ck.model, data.images, branch))
    with no_grad():
        a = model.eval().forward_all(Tensor(data.images)).logits
        b = ck.model.forward_all(Tensor(data.images)).logits
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))


def test_pruned_checkpoint_round_trip(tmp_path):
    model, _, data = _trained(TopologyConfig("v2"))
    pruned = prune_to_main(model)
    save_checkpoint(tmp_path / "p.esd", pruned)
    ck = load_checkpoint(tmp_path / "p.esd")
    assert ck.header["kind"] == "pruned"
    assert all(n.startswith(("main.", "head.")) for n in ck.model.state_dict())
    assert np.array_equal(predict_logits(pruned, data.images), predict_logits(ck.model, data.images))
    assert np.array_equal(predict_logits(model, data.images), predict_logits(ck.model, data.images))


def test_optimizer_and_rng_restored(tmp_path):
    model, res, _ = _trained()
    save_checkpoint(tmp_path / "m.esd", model, None, res.optimizer, res.rng, epoch=1)
    ck = load_checkpoint(tmp_path / "m.esd")
    opt = restore_optimizer(ck)
    assert (opt.learning_rate, opt.momentum) == (res.optimizer.learning_rate, res.optimizer.momentum)
    by_name = dict(ck.model.named_parameters())
    for name, p in model.named_parameters():
        v = res.optimizer.velocity.get(id(p))
        if v is not None:
            assert np.array_equal(opt.velocity[id(by_name[name])], v)
    rng = restore_rng(ck)
    assert np.array_equal(rng.random(5), res.rng.random(5))


def test_checkpoint_without_optional_state(tmp_path):
    model, _, _ = _trained()
    save_checkpoint(tmp_path / "m.esd", model)
    ck = load_checkpoint(tmp_path / "m.esd")
    assert ck.velocity is None and restore_optimizer(ck) is None and restore_rng(ck) is None


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    model, _, _ = _trained()
    good = tmp_path / "m.esd"
    save_checkpoint(good, model)
    raw = good.read_bytes()
    (tmp_path / "bad.esd").write_bytes(b"NOTESD\n" + raw[len(MAGIC):])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.esd")
    for cut in (len(MAGIC) + 2, len(raw) // 2, len(raw) - 1):
        (tmp_path / "short.esd").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "short.esd")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.esd")


def test_checkpoint_write_leaves_no_temp_files(tmp_path):
    model, _, _ = _trained()
    save_checkpoint(tmp_path / "m.esd", model)
    save_checkpoint(tmp_path / "m.esd", model)
    assert os.listdir(tmp_path) == ["m.esd"]


# -- metrics ---------------------------------------------------------------------------


def _rows(n):
    return [EpochMetrics(e + 1, 0.1, 2.0 / (e + 1), 0.01 * e, 1 / 3, 2.5, 0.123456789, 0.5, 0.6) for e in range(n)]


def test_zero_epochs_header_only(tmp_path):
    p = tmp_path / "m.csv"
    emit_metrics([], p)
    assert p.read_text() == ",".join(HEADER) + "\n"
    assert HEADER == ["epoch", "lr", "ce_sum", "kl", "mse", "total", "train_acc", "main_test_acc", "ensemble_test_acc"]


def test_row_count_and_append_safety(tmp_path):
    p = tmp_path / "m.csv"
    emit_metrics(_rows(2), p)
    emit_metrics(_rows(3)[2:], p)
    lines = p.read_text().splitlines()
    assert len(lines) == 1 + 3 and lines.count(lines[0]) == 1


def test_metrics_reparse_within_f32_precision(tmp_path):
    p = tmp_path / "m.csv"
    rows = _rows(4)
    emit_metrics(rows, p)
    back = read_metrics(p)
    for a, b in zip(rows, back):
        for col in HEADER:
            x, y = getattr(a, col), getattr(b, col)
            assert abs(x - y) <= np.finfo(np.float32).eps * max(abs(x), 1e-30)


def test_metrics_foreign_header_rejected(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        read_metrics(p)


@pytest.mark.parametrize("name", ["synthetic-tiny.yaml", "cifar10-resnet20-v1.yaml"])
def test_shipped_configs_load(name):
    from pathlib import Path

    cfg = load_config(Path(__file__).parent.parent / "configs" / name)
    assert cfg.train.epochs > 0
