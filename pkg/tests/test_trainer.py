import warnings

import numpy as np
import pytest
import torch

import gla.trainer as trainer
from gla.anchors import DEFAULT_PROMPTS, UNRELATED_PROMPTS, ProjectionHead, StubTextEncoder, embed_prompts
from gla.errors import CheckpointVersionError, ConfigurationError, NumericalError, ValidationError
from gla.rf_synth import generate_dataset
from gla.trainer import (TrainConfig, evaluate, evaluate_tensors, load_checkpoint, load_split, make_anchors,
                         save_checkpoint, total_loss, train)
from gla.vae import RadarVAE, VAEArch

SMALL = dict(resolution=(16, 16), conv_channels=(4, 4, 8, 8), latent_dim=4, embed_dim=16, batch_size=8, seed=3)


def small_config(**kw):
    return TrainConfig(**{**SMALL, "max_epochs": 3, "patience": 2, **kw})


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    return generate_dataset(20, 20, seed=11, out_dir=tmp_path_factory.mktemp("ds"))


@pytest.fixture(scope="module")
def trained(manifest):
    return train(small_config(), manifest)


# -- config ------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(lambda_k=-1)
    with pytest.raises(ConfigurationError):
        TrainConfig(max_epochs=3, patience=5)
    with pytest.raises(ConfigurationError):
        TrainConfig(prompts=("a", "b", "c"))
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"learning_rate": 1e-3, "momentum": 0.9})


def test_config_defaults_and_round_trip():
    c = TrainConfig()
    assert (c.lambda_r, c.lambda_a, c.lambda_k, c.learning_rate, c.max_epochs, c.patience) == \
        (5.0, 1.0, 0.01, 5e-4, 20, 5)
    assert c.prompts == DEFAULT_PROMPTS
    assert TrainConfig.from_dict(c.to_dict()) == c
    assert c.with_overrides(lambda_a=0.0).lambda_a == 0.0


# -- total_loss --------------------------------------------------------------------------

def _batch(config, n=6, dtype=torch.float64):
    g = torch.Generator().manual_seed(0)
    x = torch.rand(n, 3, *config.resolution, generator=g, dtype=dtype)
    y = torch.tensor([0, 1] * (n // 2))
    eps = torch.randn(n, config.latent_dim, generator=g, dtype=dtype)
    torch.manual_seed(1)
    model = RadarVAE(config.arch).to(dtype)
    head = ProjectionHead(config.latent_dim, config.embed_dim).to(dtype)
    anchors = make_anchors(config).tensor(dtype)
    return model, head, anchors, x, y, eps


@pytest.mark.parametrize("reduction", ["mean", "sum"])
def test_loss_decomposition_identity(reduction):
    for seed in range(5):
        cfg = small_config(seed=seed, recon_reduction=reduction)
        _, comps = total_loss(*_batch(cfg), cfg)
        assert abs(comps.total - (5 * comps.recon + 1 * comps.align + 0.01 * comps.kld)) < 1e-9


def test_only_reconstruction_when_other_weights_zero():
    cfg = small_config(lambda_a=0.0, lambda_k=0.0)
    loss, comps = total_loss(*_batch(cfg), cfg)
    assert loss.item() == 5 * comps.recon


def test_all_weights_zero_gives_zero_loss_and_gradient():
    cfg = small_config(lambda_r=0.0, lambda_a=0.0, lambda_k=0.0)
    model, head, anchors, x, y, eps = _batch(cfg)
    loss, _ = total_loss(model, head, anchors, x, y, eps, cfg)
    loss.backward()
    assert loss.item() == 0.0
    assert all(p.grad is None or torch.all(p.grad == 0) for p in list(model.parameters()) + list(head.parameters()))


def test_alignment_uses_mu_not_z():
    cfg = small_config(lambda_r=0.0, lambda_k=0.0)
    model, head, anchors, x, y, eps = _batch(cfg)
    _, a = total_loss(model, head, anchors, x, y, eps, cfg)
    _, b = total_loss(model, head, anchors, x, y, eps * 100, cfg)
    assert a.align == b.align


def test_unlabeled_frame_rejected():
    cfg = small_config()
    model, head, anchors, x, y, eps = _batch(cfg)
    with pytest.raises(ValidationError):
        total_loss(model, head, anchors, x, torch.full_like(y, -1), eps, cfg)


# -- training ------------------------------------------------------------------------------

def test_zero_epochs_returns_initial_checkpoint(manifest):
    cfg = small_config(max_epochs=0)
    ckpt = train(cfg, manifest)
    torch.manual_seed(trainer._seed_int(cfg.seed))
    fresh = RadarVAE(cfg.arch)
    assert ckpt.epoch == 0 and ckpt.history == []
    for k, v in fresh.state_dict().items():
        assert np.array_equal(ckpt.model_state[k], v.numpy())


def test_same_seed_same_parameters(manifest, trained):
    again = train(small_config(), manifest)
    assert again.parameter_digest() == trained.parameter_digest()
    assert again.history == trained.history


def test_early_stopping_bounds(manifest):
    cfg = small_config(max_epochs=6, patience=1, learning_rate=5e-2)
    ckpt = train(cfg, manifest)
    runs = ckpt.extra["epochs_run"]
    assert runs <= cfg.max_epochs
    assert runs - ckpt.extra["best_epoch"] <= cfg.patience


def test_history_and_best_checkpoint(trained):
    assert 1 <= len(trained.history) <= 3
    best = min(row["val_total"] for row in trained.history)
    assert trained.best_val_loss <= best
    assert trained.epoch == trained.extra["best_epoch"]


def test_plain_vae_when_alignment_weight_zero(manifest):
    cfg = small_config(lambda_a=0.0)
    init = train(cfg.with_overrides(max_epochs=0), manifest)
    done = train(cfg, manifest)
    assert done.epoch > 0
    assert done.parameter_digest("head") == init.parameter_digest("head")
    assert done.parameter_digest("vae") != init.parameter_digest("vae")


def test_single_class_training_split_rejected(tmp_path):
    m = generate_dataset(8, 0, seed=1, out_dir=tmp_path)
    with pytest.raises(ConfigurationError):
        train(small_config(), m)


def test_nan_component_is_named(manifest, monkeypatch):
    monkeypatch.setattr(trainer, "kld_loss", lambda code: torch.tensor(float("nan")))
    with pytest.raises(NumericalError, match="kld"):
        train(small_config(), manifest)


def test_anchors_stay_frozen(manifest):
    anchors = make_anchors(small_config())
    before = anchors.vectors.copy()
    train(small_config(max_epochs=1, patience=1), manifest, anchors=anchors)
    assert before.tobytes() == anchors.vectors.tobytes()


def test_frozen_backbone_only_moves_head(manifest, trained):
    ckpt = train(small_config(prompts=UNRELATED_PROMPTS), manifest, init_from=trained, freeze_vae=True)
    assert ckpt.parameter_digest("vae") == trained.parameter_digest("vae")
    assert ckpt.extra["freeze_vae"] is True


# -- evaluation ---------------------------------------------------------------------------------

class _OracleVAE(RadarVAE):
    """mu = (1 - m, m) where m is the frame mean; paired with W = [t0 t1]."""

    def encode(self, x):
        code, feats = super().encode(x)
        m = x.mean(dim=(1, 2, 3))
        code.mu = torch.stack([1 - m, m], dim=1)
        return code, feats


def test_perfect_anchor_match_gives_full_accuracy():
    cfg = small_config(latent_dim=2)
    anchors = make_anchors(cfg)
    model = _OracleVAE(cfg.arch)
    head = ProjectionHead(2, cfg.embed_dim)
    with torch.no_grad():
        head.weight.copy_(anchors.tensor().T)
    y = torch.tensor([0, 1, 1, 0, 1])
    x = y.float()[:, None, None, None].expand(5, 3, 16, 16).contiguous()
    res = evaluate_tensors(model, head, anchors, x, y, cfg)
    assert res.alignment_accuracy == 1.0
    np.testing.assert_allclose(res.logits[y.numpy() == 1, 1], 10.0, rtol=1e-5)


def test_accuracy_matches_brute_force_recount(manifest, trained):
    res = evaluate(trained, manifest, "test")
    hits = 0
    for row, label in zip(res.logits, res.labels):
        pred = 0 if row[0] >= row[1] else 1
        hits += int(pred == label)
    assert res.alignment_accuracy == hits / len(res.labels)
    assert 0.0 <= res.alignment_accuracy <= 1.0
    assert len(res.frame_ids) == len(res.labels)


def test_empty_split_rejected(trained):
    cfg = trained.config
    model, head = trained.build()
    with pytest.raises(ValidationError):
        evaluate_tensors(model, head, trained.anchors, torch.zeros(0, 3, 16, 16), torch.zeros(0), cfg)


# -- checkpoints ----------------------------------------------------------------------------------

def test_checkpoint_round_trip_is_byte_stable(tmp_path, trained):
    a = save_checkpoint(trained, tmp_path / "a.ckpt")
    loaded = load_checkpoint(a)
    b = save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert a.read_bytes() == b.read_bytes()
    assert loaded.parameter_digest() == trained.parameter_digest()
    assert loaded.config == trained.config
    assert list(loaded.anchors.prompts) == list(DEFAULT_PROMPTS)


def test_reloaded_checkpoint_reproduces_best_val_loss(tmp_path, manifest, trained):
    loaded = load_checkpoint(save_checkpoint(trained, tmp_path / "c.ckpt"))
    x, y, _ = load_split(manifest, "val", loaded.config)
    model, head = loaded.build()
    res = evaluate_tensors(model, head, loaded.anchors, x, y, loaded.config)
    assert abs(res.mean_total - loaded.best_val_loss) < 1e-6


def test_optimizer_state_survives_round_trip(tmp_path, trained):
    loaded = load_checkpoint(save_checkpoint(trained, tmp_path / "o.ckpt"))
    model, head = loaded.build()
    opt = trainer.restore_optimizer(loaded, model, head)
    state = opt.state_dict()["state"]
    assert len(state) == len(trained.optimizer_state["step"])
    first = trained.optimizer_state["names"][0]
    np.testing.assert_array_equal(state[0]["exp_avg"].numpy(), trained.optimizer_state["exp_avg"][first])


def test_wrong_schema_version(tmp_path, trained, monkeypatch):
    monkeypatch.setattr(trainer, "CHECKPOINT_SCHEMA", 99)
    path = save_checkpoint(trained, tmp_path / "v.ckpt")
    monkeypatch.setattr(trainer, "CHECKPOINT_SCHEMA", 1)
    with pytest.raises(CheckpointVersionError, match="schema_version 99"):
        load_checkpoint(path)


def test_corrupt_blob_detected(tmp_path, trained):
    path = save_checkpoint(trained, tmp_path / "x.ckpt")
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_anchor_mismatch_warns(tmp_path, trained):
    path = save_checkpoint(trained, tmp_path / "w.ckpt")
    other = embed_prompts(UNRELATED_PROMPTS, StubTextEncoder(16))
    with pytest.warns(UserWarning, match="anchors differ"):
        load_checkpoint(path, anchors=other)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_checkpoint(path, anchors=trained.anchors)
