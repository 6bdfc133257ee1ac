"""
Unit tests for the model zoo: ViT autoencoder, FC head, CNN baseline and tabular autoencoder.
"""

import os
import sys

import numpy as np
import pandas as pd
import pytest
import torch

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..', 'src'))
from declineforge.errors import ArgumentError, ConfigError, DataError, ShapeError, TrainingDivergedError
from declineforge.models import (
    CnnBaseline,
    CnnConfig,
    ReconHistory,
    ViTConfig,
    accuracy,
    build_vit,
    cnn_param_store,
    embeddings_from_frame,
    embeddings_to_frame,
    extract_embeddings,
    fit_fc_head,
    latent_dim,
    pretrain_reconstruction,
    train_cnn_baseline,
    train_fc_head,
    train_tabular_autoencoder,
    volumes_to_tensor,
)
from declineforge.nncore import TrainConfig, parameter_checksum
from declineforge.synthcohort import TabularRecord

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))
from fixtures.factories import VolumeFactory, create_volume_batch

TINY_VIT = ViTConfig(vol_dims=(16, 16, 16), patch_size=8, embed_dim=16, depth=1, heads=2)


@pytest.fixture
def volumes16():
    return create_volume_batch(4, dims=(16, 16, 16))


class TestViTConfig:
    """Configuration checks."""

    @pytest.mark.unit
    def test_token_grid(self):
        assert TINY_VIT.grid == (2, 2, 2)
        assert TINY_VIT.n_tokens == 8

    @pytest.mark.unit
    def test_patch_must_divide_volume(self):
        with pytest.raises(ConfigError):
            ViTConfig(vol_dims=(16, 16, 16), patch_size=5)

    @pytest.mark.unit
    def test_heads_must_divide_embedding(self):
        with pytest.raises(ConfigError):
            ViTConfig(embed_dim=30, heads=4)


class TestViTAutoencoder:
    """Forward shapes, pretraining and embeddings."""

    @pytest.mark.unit
    def test_reconstruction_shape(self, volumes16):
        model = build_vit(TINY_VIT, seed=0)
        x = volumes_to_tensor(volumes16)
        assert x.shape == (4, 1, 16, 16, 16)
        assert float(x.max()) <= 1.0
        assert model(x).shape == x.shape
        assert model.encode(x).shape == (4, 8, 16)

    @pytest.mark.unit
    def test_decode_places_patches(self):
        """Each token's decoder output lands in its own patch."""
        model = build_vit(TINY_VIT, seed=0)
        with torch.no_grad():
            model.decoder.weight.zero_()
            model.decoder.bias.zero_()
            model.decoder.bias[0] = 1.0
        out = model.decode(torch.zeros(1, 8, 16, dtype=torch.float64))
        corners = torch.nonzero(out[0, 0]).tolist()
        assert sorted(corners) == sorted([[x, y, z] for x in (0, 8) for y in (0, 8) for z in (0, 8)])

    @pytest.mark.unit
    def test_same_seed_same_weights(self):
        assert parameter_checksum(build_vit(TINY_VIT, 3)) == parameter_checksum(build_vit(TINY_VIT, 3))
        assert parameter_checksum(build_vit(TINY_VIT, 3)) != parameter_checksum(build_vit(TINY_VIT, 4))

    @pytest.mark.unit
    def test_pretraining_lowers_mse(self, volumes16):
        model = build_vit(TINY_VIT, seed=0)
        cfg = TrainConfig(epochs=15, learning_rate=1e-2, batch_size=2, seed=1)
        history = pretrain_reconstruction(model, volumes16, cfg)
        assert len(history) == 15
        assert history.train_mse[-1] < history.train_mse[0]
        assert all(-1.0 <= s <= 1.0 for s in history.monitor_ssim)

    @pytest.mark.unit
    def test_pretraining_is_reproducible(self, volumes16):
        cfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=2, seed=1)
        a, b = build_vit(TINY_VIT, 0), build_vit(TINY_VIT, 0)
        pretrain_reconstruction(a, volumes16, cfg)
        pretrain_reconstruction(b, volumes16, cfg)
        assert parameter_checksum(a) == parameter_checksum(b)

    @pytest.mark.unit
    def test_zero_epochs(self, volumes16):
        history = pretrain_reconstruction(build_vit(TINY_VIT), volumes16, TrainConfig(epochs=0))
        assert len(history) == 0

    @pytest.mark.unit
    def test_target_count_must_match(self, volumes16):
        with pytest.raises(ShapeError):
            pretrain_reconstruction(build_vit(TINY_VIT), volumes16, TrainConfig(epochs=1), targets=volumes16[:2])

    @pytest.mark.unit
    def test_wrong_volume_size(self):
        with pytest.raises(ShapeError):
            pretrain_reconstruction(build_vit(TINY_VIT), create_volume_batch(2), TrainConfig(epochs=1))

    @pytest.mark.unit
    def test_divergence_is_reported(self, volumes16, mocker):
        mocker.patch("declineforge.models.mse_loss", return_value=torch.tensor(float("nan"), dtype=torch.float64))
        with pytest.raises(TrainingDivergedError) as excinfo:
            pretrain_reconstruction(build_vit(TINY_VIT), volumes16, TrainConfig(epochs=3, batch_size=4))
        assert excinfo.value.epoch == 1

    @pytest.mark.unit
    def test_epoch_callback(self, volumes16, mocker):
        callback = mocker.Mock()
        pretrain_reconstruction(build_vit(TINY_VIT), volumes16, TrainConfig(epochs=2, batch_size=4),
                                on_epoch=callback)
        assert callback.call_count == 2
        assert callback.call_args_list[0].args[0] == 1

    @pytest.mark.unit
    def test_embeddings_are_pooled_tokens(self, volumes16):
        model = build_vit(TINY_VIT, seed=0)
        embeddings = extract_embeddings(model, volumes16, ["A", "B", "C", "D"])
        assert [e.subject_id for e in embeddings] == ["A", "B", "C", "D"]
        expected = model.encode(volumes_to_tensor(volumes16[:1])).mean(dim=1)[0].detach().numpy()
        np.testing.assert_allclose(embeddings[0].vector, expected, atol=1e-10)

    @pytest.mark.unit
    def test_embedding_ids_must_match(self, volumes16):
        with pytest.raises(ArgumentError):
            extract_embeddings(build_vit(TINY_VIT), volumes16, ["A"])

    @pytest.mark.unit
    def test_embedding_frame_round_trip(self, volumes16):
        embeddings = extract_embeddings(build_vit(TINY_VIT), volumes16, ["A", "B", "C", "D"])
        back = embeddings_from_frame(embeddings_to_frame(embeddings))
        assert [e.subject_id for e in back] == ["A", "B", "C", "D"]
        np.testing.assert_allclose(back[2].vector, embeddings[2].vector)

    @pytest.mark.unit
    def test_history_frame(self):
        history = ReconHistory([0.5, 0.25], [0.1, 0.4])
        frame = history.to_frame()
        assert list(frame.columns) == ["epoch", "train_mse", "monitor_ssim"]
        assert ReconHistory.from_frame(frame).train_mse == [0.5, 0.25]


class TestFcHead:
    """Classifier head on frozen embeddings."""

    @pytest.mark.unit
    def test_separable_embeddings(self, rng):
        labels = np.repeat(np.arange(4), 10)
        features = np.eye(4)[labels] * 3.0 + 0.1 * rng.normal(size=(40, 4))
        features = np.hstack([features, rng.normal(size=(40, 4))])
        head = fit_fc_head(torch.from_numpy(features), labels,
                           TrainConfig(epochs=150, learning_rate=1e-3, batch_size=8, dropout_rate=0.1))
        probs = head.predict_proba(torch.from_numpy(features))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        assert accuracy(probs, labels) >= 0.95

    @pytest.mark.unit
    def test_bad_labels(self):
        with pytest.raises(ArgumentError):
            fit_fc_head(torch.zeros(3, 2, dtype=torch.float64), [0, 1, 7], TrainConfig(epochs=1))

    @pytest.mark.unit
    def test_encoder_is_frozen(self, volumes16):
        model = build_vit(TINY_VIT, seed=0)
        before = parameter_checksum(model)
        result = train_fc_head(model, volumes16, [0, 1, 2, 3], TrainConfig(epochs=3, batch_size=2),
                               val_volumes=volumes16[:2], hidden=(8,))
        assert parameter_checksum(model) == before
        assert all(p.requires_grad for p in model.parameters())
        assert result.val_probabilities.shape == (2, 4)
        assert result.classifier.predict_proba(volumes16).shape == (4, 4)


class TestCnnBaseline:
    """From-scratch 3D CNN."""

    @pytest.mark.unit
    def test_two_rate_groups(self):
        store = cnn_param_store(CnnBaseline((2, 2, 2, 2)), CnnConfig(variant="two_rate"))
        assert store.learning_rates() == {"backbone": 1e-4, "head": 1e-2}

    @pytest.mark.unit
    def test_single_rate_uses_training_rate(self):
        store = cnn_param_store(CnnBaseline((2, 2, 2, 2)), CnnConfig(variant="single_rate"),
                                TrainConfig(learning_rate=3e-4))
        assert store.learning_rates() == {"default": 3e-4}

    @pytest.mark.unit
    def test_trains_and_predicts(self, volumes16):
        classifier = train_cnn_baseline(volumes16, [0, 1, 2, 3], TrainConfig(epochs=2, batch_size=2),
                                        CnnConfig(channels=(2, 4, 4, 4)))
        probs = classifier.predict_proba(volumes16)
        assert probs.shape == (4, 4)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        assert len(classifier.losses) == 2

    @pytest.mark.unit
    def test_small_volumes_rejected(self):
        with pytest.raises(ConfigError):
            train_cnn_baseline(create_volume_batch(2), [0, 1], TrainConfig(epochs=1))


class TestTabularAutoencoder:
    """Per-group tabular encoder."""

    @pytest.mark.unit
    def test_latent_dimension(self):
        assert latent_dim(8) == 4
        assert latent_dim(3) == 2
        assert latent_dim(20) == 8

    @pytest.mark.unit
    def test_latents_for_every_record(self, small_records):
        records, _ = small_records
        train_ids = [r.subject_id for r in records[:40]]
        result = train_tabular_autoencoder(records, "cognitive_scores",
                                           TrainConfig(epochs=5, learning_rate=1e-2, batch_size=16), train_ids)
        assert set(result.latents) == {r.subject_id for r in records}
        assert result.latents[records[-1].subject_id].shape == (4,)
        assert np.isfinite(result.encoder.reconstruction_mse)
        assert not any(np.isnan(z).any() for z in result.latents.values())

    @pytest.mark.unit
    def test_unknown_group(self, small_records):
        with pytest.raises(ArgumentError):
            train_tabular_autoencoder(small_records[0], "genomics", TrainConfig(epochs=1))

    @pytest.mark.unit
    def test_all_missing_column(self, small_records):
        records, _ = small_records
        holed = []
        for r in records:
            groups = {k: v.copy() for k, v in r.groups.items()}
            groups["csf_markers"][1] = np.nan
            holed.append(TabularRecord(r.subject_id, groups))
        with pytest.raises(DataError) as excinfo:
            train_tabular_autoencoder(holed, "csf_markers", TrainConfig(epochs=1))
        assert "TAU" in str(excinfo.value)
