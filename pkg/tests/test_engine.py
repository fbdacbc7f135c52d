import json

import numpy as np
import pytest
import torch

from odgclip.datasets import OpenSample
from odgclip.encoders import make_mock_backend
from odgclip.engine import (Checkpoint, TrainConfig, build_model, load_checkpoint, lr_at, predict,
                            save_checkpoint, train)
from odgclip.errors import CheckpointError, ConfigurationError, DataError, DivergenceError

FAST = dict(batch_size=8, steps_per_epoch=2, epochs=2)


@pytest.fixture(scope="module")
def pool():
    rng = np.random.default_rng(5)
    return [OpenSample(rng.random((32, 32, 3)), d) for d in ("art", "cartoon", "photo") for _ in range(3)]


@pytest.fixture(scope="module")
def trained(small_split, small_suite, backend, pool):
    return train(small_split, small_suite, pool, backend, TrainConfig(**FAST))


def test_lr_schedule():
    total = 100
    lrs = [lr_at(s, total, 0.01, 0.1) for s in range(total)]
    assert lrs[0] == pytest.approx(0.001) and lrs[9] == pytest.approx(0.01)
    assert max(lrs) == pytest.approx(0.01)
    assert all(a >= b for a, b in zip(lrs[9:], lrs[10:]))
    assert lrs[-1] < 1e-5


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(base_lr=0), dict(batch_size=2), dict(open_fraction=1.0),
                                 dict(tau=0), dict(init_mode="zeros"), dict(dom_token_position="top")])
def test_config_validation(bad):
    with pytest.raises(ConfigurationError):
        TrainConfig(**bad)


def test_train_log_and_meta(trained, small_split):
    assert len(trained.log) == 4
    assert {"step", "l_con", "l_sem", "total", "n_sem_pairs", "lr"} <= set(trained.log[0])
    assert all(r["total"] == pytest.approx(r["l_con"] + r["l_sem"]) for r in trained.log)
    meta = trained.checkpoint.meta
    assert meta["labels"] == list(small_split.augmented_labels)
    assert meta["target"] == small_split.target and meta["steps"] == 4


def test_backend_untouched(small_split, small_suite, pool):
    be = make_mock_backend(0, 16, 16, 16)
    h = be.param_hash()
    train(small_split, small_suite, pool, be, TrainConfig(**FAST))
    assert be.param_hash() == h


def test_missing_pool(small_split, small_suite, backend):
    with pytest.raises(DataError):
        train(small_split, small_suite, [], backend, TrainConfig(**FAST))
    # closed-set training needs no pool
    res = train(small_split, small_suite, [], backend, TrainConfig(**FAST, open_fraction=0.0, max_steps=1))
    assert len(res.log) == 1


def test_checkpoint_roundtrip(trained, backend, small_suite, tmp_path):
    path = save_checkpoint(trained.checkpoint, tmp_path / "m.odg")
    back = load_checkpoint(path)
    assert back.meta == json.loads(json.dumps(trained.checkpoint.meta))
    assert set(back.tensors) == set(trained.checkpoint.tensors)
    imgs = np.stack([s.image for s in small_suite.samples[:5]])
    n1, p1 = predict(back, backend, imgs)
    n2, p2 = predict(trained.model, backend, imgs, tau=0.01)
    assert n1 == n2 and np.array_equal(p1, p2)


def test_checkpoint_corruption(trained, tmp_path):
    data = trained.checkpoint.to_bytes()
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(data[:-10])
    flipped = bytearray(data)
    flipped[-1] ^= 0xFF
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing.odg")


def test_checkpoint_backend_mismatch(trained):
    with pytest.raises(CheckpointError):
        trained.checkpoint.to_model(make_mock_backend(1, 16, 16, 16))


def test_predict_single_and_labels(trained, backend, small_suite):
    img = small_suite.samples[0].image
    name, probs = predict(trained.checkpoint, backend, img)
    assert name in trained.checkpoint.labels and probs.shape == (5,)
    assert probs.sum() == pytest.approx(1.0)
    with pytest.raises(CheckpointError):
        predict(trained.checkpoint, backend, img, labels=list(reversed(trained.checkpoint.labels)))
    with pytest.raises(ConfigurationError):
        predict(trained.model, backend, img)


def test_deterministic_bytes(trained, small_split, small_suite, backend, pool):
    again = train(small_split, small_suite, pool, backend, TrainConfig(**FAST))
    assert again.checkpoint.to_bytes() == trained.checkpoint.to_bytes()


def test_resume_matches_uninterrupted(small_split, small_suite, backend, pool, tmp_path):
    cfg = TrainConfig(**FAST)
    full = train(small_split, small_suite, pool, backend, cfg, epoch_checkpoint=tmp_path / "ck-{step}.odg")
    assert sorted(p.name for p in tmp_path.glob("ck-*.odg")) == ["ck-2.odg", "ck-4.odg"]
    assert load_checkpoint(tmp_path / "ck-2.odg").meta["step"] == 2
    resumed = train(small_split, small_suite, pool, backend, cfg, resume_path=tmp_path / "ck-2.odg",
                    log_path=tmp_path / "log.jsonl")
    assert resumed.checkpoint.to_bytes() == full.checkpoint.to_bytes()
    assert [r["step"] for r in resumed.log] == [0, 1, 2, 3]
    assert [json.loads(x)["step"] for x in (tmp_path / "log.jsonl").read_text().splitlines()] == [2, 3]


def test_resume_config_mismatch(small_split, small_suite, backend, pool, tmp_path):
    train(small_split, small_suite, pool, backend, TrainConfig(**FAST, max_steps=1), epoch_checkpoint=tmp_path / "c")
    with pytest.raises(CheckpointError):
        train(small_split, small_suite, pool, backend, TrainConfig(**FAST), resume_path=tmp_path / "c")


def test_divergence(small_split, small_suite, backend, pool, monkeypatch):
    import odgclip.engine as eng
    from odgclip.objectives import LossReport

    def boom(*a, **k):
        nan = torch.tensor(float("nan"), dtype=torch.float64, requires_grad=True)
        return LossReport(nan, nan * 0, 0)

    monkeypatch.setattr(eng, "total_loss", boom)
    with pytest.raises(DivergenceError):
        train(small_split, small_suite, pool, backend, TrainConfig(**FAST))


def test_ablation_configs_build(backend, small_split):
    m = build_model(backend, small_split.augmented_labels, TrainConfig(use_xhat=False))
    assert not m.use_xhat
    m = build_model(backend, small_split.augmented_labels, TrainConfig(manual_xhat=True))
    imgs = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    out = m(imgs)
    assert torch.allclose(out.xhat[0], out.xhat[1])  # manual differentials ignore the image
