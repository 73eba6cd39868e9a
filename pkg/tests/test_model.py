"""Tests pour le module model."""

import time
from pathlib import Path

import numpy as np
import pytest

import numerics
from file_operations import IntegrityError
from model import (
    PRESETS, TOY_PARAMETER_BUDGET, ModelConfig, build_model, forward, load_checkpoint, predict_proba,
    save_checkpoint,
)
from numerics import NumericalError, ShapeError, Tape

SMALL = dict(stage_dims=(16, 32, 32, 64), heads=(2, 2, 2, 2), input_shape=(3, 64, 64))


def small_model(variant='ScatterFormer', seed=0):
    return build_model(ModelConfig(variant=variant, **SMALL), np.random.default_rng(seed))


class TestModelConfig:
    """Tests pour ModelConfig."""

    def test_widths_must_divide(self):
        """Test qu'une largeur non divisible par 2 × têtes est refusée."""
        with pytest.raises(ValueError):
            ModelConfig(stage_dims=(30, 64, 128, 256))

    def test_input_must_divide(self):
        """Test qu'une entrée non divisible par 16 est refusée."""
        with pytest.raises(ValueError):
            ModelConfig(input_shape=(3, 90, 256))

    def test_stage_shapes(self):
        """Test les résolutions des étages de la configuration réduite."""
        assert ModelConfig().stage_shapes() == [(24, 64), (12, 32), (6, 16), (6, 16)]

    def test_paper_config_expressible(self):
        """Test que la configuration pleine échelle est valide et garde quatre niveaux de résolution."""
        cfg = ModelConfig.paper()

        assert cfg.input_shape == (3, 768, 256)
        assert cfg.scale == 'paper'
        assert cfg.mlp_ratio == 4
        assert cfg.stage_shapes() == [(192, 64), (96, 32), (48, 16), (24, 8)]
        assert cfg.merge_kinds() == ('scattering', 'scattering', 'scattering')

    @pytest.mark.parametrize("variant,last", [('Proto', 'conv'), ('ConvScat2', 'conv'), ('FourierFormer', 'conv')])
    def test_paper_last_merge_follows_preset(self, variant, last):
        """Test que la fusion du quatrième étage reprend celle des étages intermédiaires."""
        assert ModelConfig.paper(variant).merge_kinds()[2] == last

    def test_toy_last_merge_is_pointwise(self):
        """Test qu'à l'échelle réduite le quatrième étage ne sous-échantillonne pas."""
        cfg = ModelConfig()

        assert not cfg.last_stage_downsamples()
        assert cfg.merge_kinds() == ('scattering', 'scattering', 'pointwise')

    def test_mlp_ratio_defaults(self):
        """Test le rapport MLP : 4 par défaut, 2 à l'échelle réduite sauf valeur explicite."""
        assert ModelConfig.model_fields['mlp_ratio'].default == 4
        assert ModelConfig().mlp_ratio == 2
        assert ModelConfig(mlp_ratio=3).mlp_ratio == 3
        assert ModelConfig(scale='paper').mlp_ratio == 4

    def test_unknown_scale_rejected(self):
        """Test qu'une échelle inconnue est refusée."""
        with pytest.raises(ValueError):
            ModelConfig(scale='full')


class TestBuildModel:
    """Tests pour build_model."""

    @pytest.mark.parametrize("variant", sorted(PRESETS))
    def test_toy_budget(self, variant):
        """Test que chaque variante réduite respecte le budget de paramètres."""
        model = build_model(ModelConfig(variant=variant), np.random.default_rng(0))

        assert 0 < model.store.count() <= TOY_PARAMETER_BUDGET

    def test_scatterformer_larger_than_proto(self):
        """Test que ScatterFormer a plus de paramètres que Proto à largeurs égales."""
        rng = np.random.default_rng
        proto = build_model(ModelConfig(variant='Proto'), rng(0)).store.count()
        scatter = build_model(ModelConfig(variant='ScatterFormer'), rng(0)).store.count()

        assert scatter > proto

    def test_same_seed_same_parameters(self):
        """Test que deux constructions de même graine sont identiques au bit près."""
        a, b = small_model(seed=3), small_model(seed=3)
        for name, p in a.store.params.items():
            assert p.data.tobytes() == b.store.params[name].data.tobytes()

    def test_proto_has_no_scattering(self):
        """Test l'audit structurel : Proto ne contient aucune couche de diffusion."""
        assert small_model('Proto').scattering_layers() == []
        assert 'stem' in small_model('ScatterFormer').scattering_layers()
        assert small_model('ConvScat2').scattering_layers() == ['stem', 'stage2.merge']

    def test_names_unique_and_inventory(self):
        """Test que l'inventaire couvre tous les paramètres."""
        model = small_model()
        inventory = model.inventory()

        assert sum(inventory.values()) == model.store.count()
        assert {'stem', 'stage1', 'stage4', 'head'} <= set(inventory)


class TestForward:
    """Tests pour forward."""

    def test_proto_toy_forward(self, rng):
        """Test Proto réduit sur un lot de 2 images 3×96×256."""
        model = build_model(ModelConfig(variant='Proto'), np.random.default_rng(0))
        logits = forward(model, rng.standard_normal((2, 3, 96, 256)), 'eval')

        assert logits.shape == (2, 2)
        assert np.all(np.isfinite(logits.data))

    @pytest.mark.parametrize("variant", sorted(PRESETS))
    def test_variants_forward(self, variant, rng):
        """Test la propagation de chaque variante sur une petite entrée."""
        logits = forward(small_model(variant), rng.standard_normal((2, 3, 64, 64)), 'train')

        assert logits.shape == (2, 2)

    def test_duplicate_sample_identical_rows(self, rng):
        """Test qu'un échantillon dupliqué donne deux lignes identiques en évaluation."""
        x = rng.standard_normal((1, 3, 64, 64))
        logits = forward(small_model(), np.concatenate([x, x]), 'eval').data

        np.testing.assert_allclose(logits[0], logits[1], rtol=0, atol=1e-6)

    def test_softmax_rows_sum_to_one(self, rng):
        """Test que les probabilités somment à 1."""
        proba = predict_proba(small_model(), rng.standard_normal((3, 3, 64, 64)))

        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)

    def test_eval_is_pure(self, rng):
        """Test que deux évaluations identiques donnent les mêmes logits au bit près."""
        model = small_model()
        x = rng.standard_normal((2, 3, 64, 64))

        assert forward(model, x).data.tobytes() == forward(model, x).data.tobytes()

    def test_per_sample_independence(self, rng):
        """Test que les logits d'un échantillon ne dépendent pas des autres en évaluation."""
        model = small_model()
        x = rng.standard_normal((3, 3, 64, 64))
        batch = forward(model, x).data
        alone = forward(model, x[1:2]).data

        np.testing.assert_allclose(batch[1], alone[0], atol=1e-5)

    def test_wrong_input_shape(self, rng):
        """Test qu'un lot incompatible est refusé."""
        with pytest.raises(ShapeError):
            forward(small_model(), rng.standard_normal((1, 3, 32, 64)))

    def test_nan_names_layer(self, rng):
        """Test qu'une activation non finie lève une erreur nommant la couche."""
        model = small_model('Proto')
        model.store.params['stem.conv1'].data[...] = np.nan

        with pytest.raises(NumericalError, match="stem"):
            forward(model, rng.standard_normal((1, 3, 64, 64)))

    def test_capture(self, rng):
        """Test la capture des cartes d'attention et des sorties d'étages."""
        capture = {}
        forward(small_model(), rng.standard_normal((1, 3, 64, 64)), capture=capture)

        assert capture['stage1.block0.high_attn'].shape == (1, 2, 4, 4)
        assert capture['stage4'].shape == (1, 64, 4, 4)

    def test_gradients_reach_all_parameters(self, rng):
        """Test que la rétropropagation atteint chaque paramètre."""
        model = small_model()
        targets = np.eye(2)[[0, 1]]
        with Tape() as tape:
            loss = numerics.cross_entropy(forward(model, rng.standard_normal((2, 3, 64, 64)), 'train'), targets)
        grads = numerics.backward(tape, loss, model.parameters())

        assert len(grads) == len(model.parameters())
        for p, g in zip(model.parameters(), grads):
            assert g.shape == p.shape
            assert np.all(np.isfinite(g))
        assert sum(np.any(g != 0) for g in grads) > 0.9 * len(grads)

    @pytest.mark.slow
    def test_toy_latency(self, rng):
        """Test l'évaluation de 100 images par ScatterFormer réduit en moins de 60 s."""
        model = build_model(ModelConfig(), np.random.default_rng(0))
        images = rng.standard_normal((100, 3, 96, 256)).astype(np.float32)
        start = time.perf_counter()
        for i in range(0, 100, 10):
            forward(model, images[i:i + 10])

        assert time.perf_counter() - start < 60.0


class TestCheckpoint:
    """Tests pour save_checkpoint / load_checkpoint."""

    def test_save_load_save_identical(self, temp_dir, rng):
        """Test que sauvegarde → chargement → sauvegarde donne des blobs identiques."""
        model = small_model()
        forward(model, rng.standard_normal((2, 3, 64, 64)), 'train')
        first, second = Path(temp_dir) / 'a', Path(temp_dir) / 'b'
        save_checkpoint(model, first)
        loaded, _ = load_checkpoint(first)
        save_checkpoint(loaded, second)

        for blob in sorted(first.glob('*.bin')):
            assert blob.read_bytes() == (second / blob.name).read_bytes()

    def test_logits_bit_exact(self, temp_dir, rng):
        """Test que les logits avant sauvegarde et après chargement sont identiques."""
        model = small_model()
        forward(model, rng.standard_normal((2, 3, 64, 64)), 'train')
        x = rng.standard_normal((2, 3, 64, 64))
        before = forward(model, x).data
        save_checkpoint(model, Path(temp_dir), extra={'fold': 0})
        loaded, extra = load_checkpoint(Path(temp_dir))

        assert np.max(np.abs(forward(loaded, x).data - before)) == 0
        assert extra == {'fold': 0}

    def test_missing_blob_names_parameter(self, temp_dir):
        """Test qu'un blob manquant lève une erreur d'intégrité nommant le paramètre."""
        save_checkpoint(small_model(), Path(temp_dir))
        (Path(temp_dir) / 'head.weight.bin').unlink()

        with pytest.raises(IntegrityError, match="head.weight"):
            load_checkpoint(Path(temp_dir))

    def test_missing_manifest(self, temp_dir):
        """Test qu'un répertoire sans manifeste est refusé."""
        with pytest.raises(IntegrityError):
            load_checkpoint(Path(temp_dir))
