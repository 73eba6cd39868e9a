"""Tests pour le module training."""

import itertools
import json
from collections import namedtuple
from pathlib import Path

import numpy as np
import pytest

import training
from file_operations import IntegrityError
from model import ModelConfig, build_model, load_checkpoint
from numerics import ShapeError, Tensor
from training import (
    AdamState, DivergenceError, FoldResult, ImageDataset, TrainConfig, adamw_step, aggregate, augment_batch,
    compute_metrics, cosine_lr, ema_update, evaluate_checkpoint, subject_kfold, subject_kfold_epochs,
    train_fold, train_loop,
)

SMALL = dict(stage_dims=(16, 32, 32, 64), heads=(2, 2, 2, 2), input_shape=(3, 64, 64))
FAST = dict(epochs_max=2, early_stop_patience=1, batch_size=4, folds=2, seed=7)

Record = namedtuple('Record', 'subject_id label')


def tiny_dataset(n_subjects=4, per_subject=4, seed=0):
    """Petit jeu séparable : les positifs ont un bloc de lignes surélevé."""
    rng = np.random.default_rng(seed)
    n = n_subjects * per_subject
    images = rng.normal(0.0, 1.0, (n, 3, 64, 64)).astype(np.float32)
    labels = np.tile([0, 1], n // 2)
    images[labels == 1, :, 8:16] += 2.0
    subjects = np.repeat([f"s{i:02d}" for i in range(n_subjects)], per_subject)
    return ImageDataset(images, labels, subjects, rows_per_channel=4)


def pair_auc(scores, labels):
    """AUC par comptage des paires concordantes (égalités à ½)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


class TestTrainConfig:
    """Tests pour TrainConfig."""

    def test_defaults(self):
        """Test les valeurs par défaut de la recette."""
        cfg = TrainConfig()
        assert cfg.lr0 == 5e-4
        assert cfg.weight_decay == 0.05
        assert cfg.ema_decay == 0.9999
        assert cfg.mixup_alpha == 0.2

    def test_patience_below_epochs(self):
        """Test qu'une patience supérieure au nombre d'époques est refusée."""
        with pytest.raises(ValueError):
            TrainConfig(epochs_max=5, early_stop_patience=5)

    def test_negative_rejected(self):
        """Test qu'un taux négatif est refusé."""
        with pytest.raises(ValueError):
            TrainConfig(lr0=-1.0)


class TestAdamW:
    """Tests pour adamw_step."""

    def step(self, theta, grad, t=1, lr=1e-3, wd=0.05, state=None):
        p = Tensor(np.array([theta]), requires_grad=True)
        state = state or AdamState.zeros([p])
        adamw_step([p], [np.array([grad])], state, t, lr, TrainConfig(weight_decay=wd))
        return p, state

    def test_zero_grad_no_decay(self, f64):
        """Test qu'un gradient nul sans décroissance ne change rien."""
        p, _ = self.step(1.5, 0.0, wd=0.0)
        assert p.data[0] == 1.5

    def test_scalar_update(self, f64):
        """Test le pas scalaire θ=1, g=1, lr=1e-3, wd=0.05."""
        p, _ = self.step(1.0, 1.0)
        assert p.data[0] == pytest.approx(1.0 - 1e-3 * (1.0 / (1.0 + 1e-8) + 0.05), abs=1e-12)
        assert p.data[0] == pytest.approx(0.998950, abs=1e-6)

    def test_pure_decay(self, f64):
        """Test que wd > 0 et un gradient nul donnent θ(1 − lr·wd)."""
        p, _ = self.step(2.0, 0.0, lr=1e-2, wd=0.1)
        assert p.data[0] == pytest.approx(2.0 * (1 - 1e-3), abs=1e-12)

    def test_two_step_adam_trace(self, f64):
        """Test une trace scalaire de deux pas sans décroissance (Adam pur)."""
        lr = 1e-3
        p, state = self.step(1.0, 1.0, t=1, lr=lr, wd=0.0)
        p2 = Tensor(p.data.copy(), requires_grad=True)
        adamw_step([p2], [np.array([0.5])], state, 2, lr, TrainConfig(weight_decay=0.0))

        m = 0.9 * 0.1 + 0.1 * 0.5
        v = 0.999 * 0.001 + 0.001 * 0.25
        m_hat, v_hat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
        theta1 = 1.0 - lr * 1.0 / (1.0 + 1e-8)
        expected = theta1 - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert p2.data[0] == pytest.approx(expected, abs=1e-12)

    def test_step_must_start_at_one(self, f64):
        """Test qu'un numéro de pas nul est refusé."""
        with pytest.raises(ValueError):
            self.step(1.0, 1.0, t=0)


class TestCosineLr:
    """Tests pour cosine_lr."""

    def test_endpoints(self):
        """Test le début, le milieu et la fin de la décroissance."""
        assert cosine_lr(0, 100, 5e-4) == pytest.approx(5e-4)
        assert cosine_lr(50, 100, 5e-4) == pytest.approx(2.5e-4)
        assert cosine_lr(100, 100, 5e-4) == pytest.approx(0.0, abs=1e-20)

    def test_out_of_range(self):
        """Test qu'un pas au-delà du total est refusé."""
        with pytest.raises(ValueError):
            cosine_lr(101, 100, 5e-4)


class TestEma:
    """Tests pour ema_update et effective_decay."""

    def test_extremes(self):
        """Test decay 0 (copie) et decay 1 (inchangé)."""
        shadow, params = {'w': np.zeros(3)}, {'w': np.ones(3)}
        np.testing.assert_array_equal(ema_update(shadow, params, 0.0)['w'], np.ones(3))
        np.testing.assert_array_equal(ema_update(shadow, params, 1.0)['w'], np.zeros(3))

    def test_closed_form(self):
        """Test shadow = p + decayᵏ(s₀ − p) après k = 10 pas."""
        s0, p, decay = np.array([3.0, -1.0]), np.array([0.5, 2.0]), 0.8
        shadow = {'w': s0}
        for _ in range(10):
            shadow = ema_update(shadow, {'w': p}, decay)
        np.testing.assert_allclose(shadow['w'], p + decay ** 10 * (s0 - p), atol=1e-12)

    def test_shape_mismatch(self):
        """Test que des formes différentes sont refusées."""
        with pytest.raises(ShapeError):
            ema_update({'w': np.zeros(3)}, {'w': np.zeros(4)}, 0.5)

    def test_warmup(self):
        """Test la borne de démarrage de la décroissance."""
        assert training.effective_decay(0.9999, 0) == pytest.approx(0.1)
        assert training.effective_decay(0.9999, 10 ** 9) == 0.9999
        assert training.effective_decay(0.9999, 0, warmup=False) == 0.9999


class TestSubjectKfold:
    """Tests pour subject_kfold."""

    def corpus(self, n_subjects=10, per_subject=40):
        subjects = np.repeat([f"p{i}" for i in range(n_subjects)], per_subject)
        labels = np.tile([0, 1], n_subjects * per_subject // 2)
        return subjects, labels

    def test_ten_subjects_five_folds(self):
        """Test 10 sujets, k=5 : deux sujets de test par pli."""
        subjects, labels = self.corpus()
        folds = subject_kfold(subjects, labels, 5, seed=0)

        assert len(folds) == 5
        assert all(len(f.test_subjects) == 2 for f in folds)
        assert sorted(s for f in folds for s in f.test_subjects) == sorted(set(subjects))

    def test_no_subject_leakage(self):
        """Test qu'aucun sujet n'est à la fois en apprentissage et en test."""
        rng = np.random.default_rng(3)
        subjects = rng.choice([f"p{i}" for i in range(12)], size=300)
        labels = rng.integers(0, 2, size=300)
        for k in (2, 3, 5):
            for fold in subject_kfold(subjects, labels, k, seed=k):
                assert not set(subjects[fold.train]) & set(subjects[fold.test])
                assert len(fold.train) + len(fold.test) == 300

    def test_deterministic(self):
        """Test que la même graine donne les mêmes plis."""
        subjects, labels = self.corpus()
        a = subject_kfold(subjects, labels, 5, seed=11)
        b = subject_kfold(subjects, labels, 5, seed=11)
        assert [f.test_subjects for f in a] == [f.test_subjects for f in b]

    def test_too_few_subjects(self):
        """Test qu'il faut au moins k sujets distincts."""
        subjects, labels = self.corpus(n_subjects=3, per_subject=4)
        with pytest.raises(ValueError):
            subject_kfold(subjects, labels, 5, seed=0)

    def test_from_epochs(self):
        """Test la variante prenant une liste d'époques."""
        epochs = [Record(f"p{i % 4}", i % 2) for i in range(16)]
        folds = subject_kfold_epochs(epochs, 2, seed=0)
        assert sum(len(f.test) for f in folds) == 16


class TestComputeMetrics:
    """Tests pour compute_metrics et aggregate."""

    def test_perfect_separation(self):
        """Test des scores parfaitement séparés."""
        result = compute_metrics([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert result.aucroc == 1.0
        assert result.aucpr == 1.0
        assert result.accuracy == 1.0
        assert result.f1 == 1.0

    def test_constant_scores(self):
        """Test que des scores constants donnent le niveau du hasard."""
        assert compute_metrics([0.5] * 6, [0, 1, 0, 1, 1, 0]).aucroc == pytest.approx(0.5)

    def test_known_value(self):
        """Test scores [0.1, 0.4, 0.35, 0.8], étiquettes [0, 0, 1, 1] → 0.75."""
        assert compute_metrics([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]).aucroc == pytest.approx(0.75)

    def test_pair_counting_oracle(self):
        """Test l'équivalence avec le comptage de paires sur des instances aléatoires."""
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(4, 51))
            labels = rng.integers(0, 2, size=n)
            labels[:2] = [0, 1]
            scores = np.round(rng.random(n), 1)
            assert compute_metrics(scores, labels).aucroc == pytest.approx(pair_auc(scores, labels), abs=1e-5)

    def test_roc_endpoints(self):
        """Test que la courbe ROC va de (0, 0) à (1, 1)."""
        fpr, tpr = compute_metrics([0.3, 0.6, 0.2, 0.9], [0, 1, 1, 0]).roc
        assert (fpr[0], tpr[0]) == (0.0, 0.0)
        assert (fpr[-1], tpr[-1]) == (1.0, 1.0)

    def test_single_class(self):
        """Test qu'une seule classe rend l'AUC indéfinie."""
        with pytest.raises(ValueError, match="AUC"):
            compute_metrics([0.1, 0.7], [1, 1])

    def test_aggregate(self):
        """Test médiane et écart interquartile."""
        results = [FoldResult(i, auc, 1.0, 1.0, 1.0) for i, auc in enumerate([0.8, 0.9, 1.0, 0.7])]
        summary = aggregate(results)

        assert summary['aucroc']['median'] == pytest.approx(0.85)
        assert summary['aucroc']['iqr'] == pytest.approx(0.15)
        assert summary['aucroc']['per_fold'] == [0.8, 0.9, 1.0, 0.7]


class TestImageDataset:
    """Tests pour ImageDataset."""

    def test_save_load(self, temp_dir):
        """Test la sauvegarde et le rechargement d'un jeu d'images."""
        data = tiny_dataset(n_subjects=2, per_subject=2)
        loaded = ImageDataset.load(data.save(Path(temp_dir)))

        np.testing.assert_array_equal(loaded.images, data.images)
        assert loaded.subject_ids.tolist() == data.subject_ids.tolist()
        assert loaded.rows_per_channel == 4

    def test_missing_index(self, temp_dir):
        """Test qu'un répertoire sans index est refusé."""
        with pytest.raises(IntegrityError):
            ImageDataset.load(Path(temp_dir))

    def test_mismatched_lengths(self):
        """Test que des tailles incohérentes sont refusées."""
        with pytest.raises(ShapeError):
            ImageDataset(np.zeros((2, 3, 8, 8)), [0], ['a', 'b'], 4)


class TestAugmentBatch:
    """Tests pour augment_batch."""

    def test_soft_labels_sum_to_one(self, rng):
        """Test que les étiquettes mélangées restent des distributions."""
        data = tiny_dataset(n_subjects=1, per_subject=4)
        x, y = augment_batch(data.images, data.labels, rng, TrainConfig(), 4)

        assert x.shape == data.images.shape
        np.testing.assert_allclose(y.sum(axis=1), 1.0)

    def test_disabled(self, rng):
        """Test que sans augmentation les images sont inchangées."""
        data = tiny_dataset(n_subjects=1, per_subject=4)
        x, y = augment_batch(data.images, data.labels, rng, TrainConfig(augment=False), 4)

        np.testing.assert_array_equal(x, data.images)
        np.testing.assert_array_equal(y, np.eye(2)[data.labels])


class TestTrainLoop:
    """Tests pour train_fold, train_loop et evaluate_checkpoint."""

    def test_outputs_written(self, temp_dir):
        """Test les fichiers produits : journal, résumé et points de sauvegarde."""
        out = Path(temp_dir)
        report = train_loop(ModelConfig(variant='Proto', **SMALL), tiny_dataset(), TrainConfig(**FAST), out)

        lines = [json.loads(l) for l in (out / 'metrics.jsonl').read_text().splitlines()]
        summary = json.loads((out / 'summary.json').read_text())
        assert len(report.folds) == 2
        assert {line['fold'] for line in lines} == {0, 1}
        assert set(summary) >= {'aucroc', 'aucpr', 'f1', 'accuracy'}
        assert (out / 'fold0' / 'manifest.json').exists()
        for r in report.folds:
            assert 0.0 <= r.aucroc <= 1.0

    def test_same_seed_identical_logs(self, temp_dir):
        """Test que deux exécutions de même graine produisent le même journal."""
        data, cfg = tiny_dataset(), TrainConfig(**FAST)
        a, b = Path(temp_dir) / 'a', Path(temp_dir) / 'b'
        train_loop(ModelConfig(variant='ScatterFormer', **SMALL), data, cfg, a)
        train_loop(ModelConfig(variant='ScatterFormer', **SMALL), data, cfg, b)

        assert (a / 'metrics.jsonl').read_bytes() == (b / 'metrics.jsonl').read_bytes()

    def test_zero_lr_keeps_parameters(self, temp_dir):
        """Test que lr0 = 0 laisse les paramètres à leur initialisation."""
        model_cfg, cfg = ModelConfig(variant='Proto', **SMALL), TrainConfig(**{**FAST, 'lr0': 0.0})
        train_loop(model_cfg, tiny_dataset(), cfg, Path(temp_dir))
        trained, _ = load_checkpoint(Path(temp_dir) / 'fold0')
        initial = build_model(model_cfg, np.random.Generator(np.random.Philox(np.random.SeedSequence([7, 0]))))

        for name, p in initial.store.params.items():
            np.testing.assert_allclose(trained.store.params[name].data, p.data, rtol=1e-6, atol=1e-7)

    def test_augmentation_only_on_training_batches(self, temp_dir, monkeypatch):
        """Test que l'augmentation ne voit que les époques d'apprentissage."""
        seen = []
        original = training.augment_batch

        def spy(images, *args, **kwargs):
            seen.append(len(images))
            return original(images, *args, **kwargs)

        monkeypatch.setattr(training, 'augment_batch', spy)
        out = Path(temp_dir)
        train_loop(ModelConfig(variant='Proto', **SMALL), tiny_dataset(), TrainConfig(**FAST), out)
        epochs_run = len((out / 'metrics.jsonl').read_text().splitlines())

        # 4 sujets × 4 époques, 2 plis : 1 sujet d'apprentissage par pli après validation
        assert sum(seen) == epochs_run * 4

    def test_checkpoint_reevaluation(self, temp_dir):
        """Test que la réévaluation d'un pli redonne exactement ses métriques."""
        data = tiny_dataset()
        report = train_loop(ModelConfig(variant='Proto', **SMALL), data, TrainConfig(**FAST), Path(temp_dir))
        again = evaluate_checkpoint(Path(temp_dir) / 'fold0', data, batch_size=4)

        assert again.aucroc == report.folds[0].aucroc
        assert again.test_subjects == report.folds[0].test_subjects

    def test_divergence(self, monkeypatch):
        """Test qu'une perte non finie interrompt le pli avec un diagnostic."""
        monkeypatch.setattr(training.numerics, 'cross_entropy', lambda logits, targets: Tensor(np.nan))
        data = tiny_dataset()
        fold = subject_kfold(data.subject_ids, data.labels, 2, seed=0)[0]

        with pytest.raises(DivergenceError, match="Pli 0"):
            train_fold(ModelConfig(variant='Proto', **SMALL), data, fold, TrainConfig(**FAST), training.MetricsLog(None))
        with pytest.raises(DivergenceError):
            train_loop(ModelConfig(variant='Proto', **SMALL), data, TrainConfig(**FAST))

    def test_wrong_image_shape(self):
        """Test que des images incompatibles avec le modèle sont refusées."""
        with pytest.raises(ShapeError):
            train_loop(ModelConfig(variant='Proto'), tiny_dataset(), TrainConfig(**FAST))
