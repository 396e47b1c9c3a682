import json
import math

import numpy as np
import pytest

import sproutlab as sp


@pytest.fixture(scope="module")
def blobs():
    return sp.synth_blobs(3, 20, 36, 4.0, 1)


def test_dataset_views(blobs):
    assert len(blobs) == 60
    assert blobs.images.shape == (60, 1, 6, 6)
    assert blobs.num_classes == 3
    assert len(blobs.head(5)) == 5
    assert blobs.id() == sp.synth_blobs(3, 20, 36, 4.0, 1).id()


def test_gce_matches_cross_entropy():
    z = np.array([[2.0, -1.0, 0.5]])
    y = np.array([[0.0, 0.0, 1.0]])
    ce = -(z[0, 2] - math.log(np.exp(z).sum()))
    assert sp.gce_loss(z, y) == pytest.approx(ce, abs=1e-12)


def test_dirichlet_draws_on_simplex():
    z = sp.sample_dirichlet([2.0, 1.0, 1.0], 7)
    assert sum(z) == pytest.approx(1.0, abs=1e-12)
    mean, cov = sp.dirichlet_moments([2.0, 1.0, 1.0])
    assert mean == pytest.approx([0.5, 0.25, 0.25])
    assert cov.shape == (3, 3)
    assert cov[0, 1] == pytest.approx(-0.025)


def test_attack_contract(blobs):
    model = sp.build_model(blobs, arch="mlp", seed=2)
    x = blobs.images
    spec = sp.AttackSpec(epsilon=0.1, steps=5)
    adv = sp.pgd_linf(model, x, blobs.labels, spec)
    assert np.abs(adv - x).max() <= 0.1 + 1e-12
    assert adv.min() >= 0.0 and adv.max() <= 1.0
    zero = sp.AttackSpec(epsilon=0.0, steps=5)
    assert sp.robust_accuracy(model, blobs, zero) == sp.accuracy(model, blobs)


def test_train_and_reload(tmp_path, blobs):
    cfg = sp.ExperimentConfig()
    for kv in ["model.arch=mlp", "train.mode=sprout", "train.epochs=2", "train.batch=16",
               "train.monitor_examples=10", "train.beta_warmup_epochs=0"]:
        cfg.apply_override(kv)
    ckpt, history = sp.train(blobs, cfg)
    assert len(history) == 2
    assert len(ckpt.log_beta) == 3
    path = tmp_path / "m.bin"
    sp.save_checkpoint(path, ckpt)
    back = sp.load_checkpoint(path)
    assert back.log_beta == ckpt.log_beta
    assert back.seed_lineage == ckpt.seed_lineage
    np.testing.assert_array_equal(back.model.logits(blobs.images), ckpt.model.logits(blobs.images))


def test_landscape_shape(blobs):
    model = sp.build_model(blobs, arch="cnn", pool=0, seed=3)
    loss, u, v = sp.loss_landscape(model, blobs.images[:1], blobs.labels[0], n_grid=4, max_mag=0.05)
    assert loss.shape == (5, 5)
    assert u[0] == pytest.approx(-0.05) and v[-1] == pytest.approx(0.05)
    assert np.isfinite(loss).all()


def test_run_command_and_errors(tmp_path):
    cfg = sp.ExperimentConfig()
    for kv in ["dataset.kind=blobs", "model.arch=mlp", "train.epochs=1"]:
        cfg.apply_override(kv)
    cfg.set("output.dir", str(tmp_path))
    files = sp.run_command("train", cfg)
    assert "checkpoint.bin" in files
    report = json.loads((tmp_path / "train.json").read_text())
    assert report["provenance"]["config.train.epochs"] == "1"
    with pytest.raises(sp.ConfigError):
        cfg.set("nope.key", "1")
    with pytest.raises(sp.SproutError):
        sp.load_checkpoint(str(tmp_path / "missing.bin"))
