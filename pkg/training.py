"""
Module d'entraînement : AdamW, décroissance cosinus, moyenne mobile
exponentielle, arrêt anticipé, validation croisée par sujet et métriques
de classification agrégées (médiane, écart interquartile).
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from sklearn import metrics as skm

import numerics
from encoder import MultispectralImage, channel_reshuffle, mixup, one_hot
from file_operations import IntegrityError, load_blob, read_json, save_blob, write_json
from model import ModelConfig, build_model, forward, iterate_batches, load_checkpoint, predict_proba, save_checkpoint
from numerics import ShapeError, Tape, Tensor

logger = logging.getLogger(__name__)

METRIC_NAMES = ('aucroc', 'aucpr', 'f1', 'accuracy')
ADAM_EPS = 1e-8
# Flux réservé au tirage de l'ordre des lots d'une époque
ORDER_STREAM = 2 ** 32 - 1


class DivergenceError(RuntimeError):
    """Perte non finie pendant l'entraînement d'un pli."""


class LeakageError(RuntimeError):
    """Un sujet apparaît à la fois dans l'apprentissage et le test d'un pli."""


class TrainConfig(BaseModel):
    """Hyperparamètres d'optimisation."""
    model_config = ConfigDict(frozen=True)

    lr0: float = Field(5e-4, ge=0)
    weight_decay: float = Field(0.05, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    epochs_max: int = Field(50, ge=1)
    early_stop_patience: int = Field(10, ge=1)
    ema_decay: float = Field(0.9999, ge=0, le=1)
    ema_warmup: bool = True
    batch_size: int = Field(16, ge=1)
    mixup_alpha: float = Field(0.2, gt=0)
    augment: bool = True
    folds: int = Field(5, ge=2)
    seed: int = Field(0, ge=0)

    @model_validator(mode='after')
    def _check(self):
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas doivent être dans [0, 1) : {self.betas}")
        if self.early_stop_patience >= self.epochs_max:
            raise ValueError("La patience doit être inférieure au nombre maximal d'époques")
        return self


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Moments de premier et second ordre, un tableau par paramètre."""
    m: List[np.ndarray]
    v: List[np.ndarray]

    @classmethod
    def zeros(cls, params: Sequence[Tensor]) -> 'AdamState':
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, t: int,
               lr_t: float, cfg: TrainConfig) -> AdamState:
    """
    Un pas AdamW à décroissance de poids découplée :
    θ ← θ − lr_t · (m̂ / (√v̂ + ε) + wd · θ).

    Args:
        params: Paramètres (mis à jour en place)
        grads: Gradients dans le même ordre
        state: Moments (mis à jour en place)
        t: Numéro du pas, à partir de 1
        lr_t: Taux d'apprentissage du pas

    Returns:
        L'état mis à jour
    """
    if t < 1:
        raise ValueError(f"Le numéro de pas commence à 1 (reçu {t})")
    b1, b2 = cfg.betas
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat, v_hat = state.m[i] / c1, state.v[i] / c2
        update = m_hat / (np.sqrt(v_hat) + ADAM_EPS) + cfg.weight_decay * p.data
        p.data = np.asarray(p.data - lr_t * update, dtype=p.dtype)
    return state


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 · ½ · (1 + cos(π · step / total_steps))."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"Pas {step} hors de [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def effective_decay(decay: float, t: int, warmup: bool = True) -> float:
    """Décroissance EMA, bornée par (1 + t) / (10 + t) pendant le démarrage."""
    return min(decay, (1.0 + t) / (10.0 + t)) if warmup else decay


def ema_update(shadow: Dict[str, np.ndarray], params: Dict[str, np.ndarray], decay: float) -> Dict[str, np.ndarray]:
    """shadow ← decay · shadow + (1 − decay) · params, pour chaque tableau nommé."""
    if set(shadow) != set(params):
        raise ShapeError("EMA : ensembles de tableaux différents")
    out = {}
    for name, s in shadow.items():
        p = params[name]
        if s.shape != p.shape:
            raise ShapeError(f"EMA : forme {s.shape} vs {p.shape} pour '{name}'")
        out[name] = (decay * s + (1.0 - decay) * p).astype(s.dtype)
    return out


def batch_rng(seed: int, fold: int, epoch: int, batch: int) -> np.random.Generator:
    """Générateur Philox dérivé de (graine, pli, époque, lot)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, fold, epoch, batch])))


# ---------------------------------------------------------------------------
# Validation croisée par sujet
# ---------------------------------------------------------------------------

@dataclass
class Fold:
    """Indices d'apprentissage et de test d'un pli, avec les sujets correspondants."""
    fold_id: int
    train: np.ndarray
    test: np.ndarray
    train_subjects: List[str]
    test_subjects: List[str]


def subject_kfold(subject_ids: Sequence[str], labels: Sequence[int], k: int, seed: int) -> List[Fold]:
    """
    Partitionne les sujets (pas les époques) en k plis.

    Affectation gloutonne : les sujets, mélangés puis triés par nombre
    d'époques décroissant, vont au pli le moins rempli ; à égalité, au pli
    dont la proportion de positifs est la plus éloignée de celle du sujet.

    Raises:
        ValueError: moins de k sujets distincts
    """
    subject_ids = np.asarray([str(s) for s in subject_ids])
    labels = np.asarray(labels, dtype=int)
    if len(subject_ids) != len(labels):
        raise ShapeError(f"{len(subject_ids)} sujets pour {len(labels)} étiquettes")
    subjects = sorted(set(subject_ids.tolist()))
    if k < 2 or len(subjects) < k:
        raise ValueError(f"{len(subjects)} sujets distincts pour {k} plis")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
    shuffled = [subjects[i] for i in rng.permutation(len(subjects))]
    counts = {s: int(np.sum(subject_ids == s)) for s in subjects}
    positives = {s: int(labels[subject_ids == s].sum()) for s in subjects}
    ordered = sorted(shuffled, key=lambda s: -counts[s])

    members: List[List[str]] = [[] for _ in range(k)]
    fold_epochs, fold_pos = [0] * k, [0] * k
    for s in ordered:
        share = positives[s] / counts[s]

        def key(f):
            ratio = fold_pos[f] / fold_epochs[f] if fold_epochs[f] else 1.0 - share
            return fold_epochs[f], len(members[f]), -abs(ratio - share), f

        target = min(range(k), key=key)
        members[target].append(s)
        fold_epochs[target] += counts[s]
        fold_pos[target] += positives[s]

    folds = []
    for f, test_subjects in enumerate(members):
        test_mask = np.isin(subject_ids, test_subjects)
        fold = Fold(f, np.flatnonzero(~test_mask), np.flatnonzero(test_mask),
                    sorted(set(subject_ids[~test_mask].tolist())), sorted(test_subjects))
        assert_no_leakage(fold, subject_ids)
        folds.append(fold)
    return folds


def subject_kfold_epochs(epochs, k: int, seed: int) -> List[Fold]:
    """`subject_kfold` sur une liste d'époques (attributs subject_id et label)."""
    return subject_kfold([e.subject_id for e in epochs], [e.label for e in epochs], k, seed)


def assert_no_leakage(fold: Fold, subject_ids: Sequence[str]) -> None:
    subject_ids = np.asarray(subject_ids)
    shared = set(subject_ids[fold.train].tolist()) & set(subject_ids[fold.test].tolist())
    if shared:
        raise LeakageError(f"Pli {fold.fold_id} : sujets partagés {sorted(shared)}")


def holdout_subject(fold: Fold, subject_ids: Sequence[str], labels: Sequence[int],
                    rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, str]:
    """
    Retire un sujet de l'apprentissage pour la validation.

    Le sujet est tiré parmi ceux qui ont les deux classes.

    Returns:
        (indices d'apprentissage, indices de validation, sujet retenu)
    """
    subject_ids, labels = np.asarray(subject_ids), np.asarray(labels)
    candidates = [s for s in fold.train_subjects
                  if len(np.unique(labels[fold.train][subject_ids[fold.train] == s])) == 2]
    if not candidates or len(fold.train_subjects) < 2:
        raise ValueError(f"Pli {fold.fold_id} : aucun sujet de validation avec les deux classes")
    chosen = candidates[int(rng.integers(len(candidates)))]
    in_val = subject_ids[fold.train] == chosen
    return fold.train[~in_val], fold.train[in_val], chosen


# ---------------------------------------------------------------------------
# Métriques
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    """Métriques de test d'un pli et courbes associées."""
    fold_id: int
    aucroc: float
    aucpr: float
    f1: float
    accuracy: float
    roc: Tuple[List[float], List[float]] = ((), ())
    pr: Tuple[List[float], List[float]] = ((), ())
    best_epoch: int = -1
    test_subjects: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5,
                    fold_id: int = 0) -> FoldResult:
    """
    AUCROC (trapèzes sur le balayage ROC complet), AUCPR (intégration en
    escalier de la courbe précision-rappel), F1 et exactitude au seuil 0,5.

    Raises:
        ValueError: une seule classe présente (AUC indéfinie)
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.shape} scores pour {labels.shape} étiquettes")
    if len(np.unique(labels)) < 2:
        raise ValueError("AUC indéfinie : une seule classe dans les étiquettes")
    fpr, tpr, _ = skm.roc_curve(labels, scores)
    precision, recall, _ = skm.precision_recall_curve(labels, scores)
    predicted = (scores >= threshold).astype(int)
    return FoldResult(
        fold_id=fold_id,
        aucroc=float(skm.roc_auc_score(labels, scores)),
        aucpr=float(skm.average_precision_score(labels, scores)),
        f1=float(skm.f1_score(labels, predicted, zero_division=0)),
        accuracy=float(skm.accuracy_score(labels, predicted)),
        roc=(fpr.tolist(), tpr.tolist()),
        pr=(recall.tolist(), precision.tolist()),
    )


def aggregate(results: Sequence[FoldResult]) -> Dict[str, dict]:
    """Médiane et écart interquartile de chaque métrique sur les plis."""
    summary = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(r, name) for r in results], dtype=np.float64)
        q1, median, q3 = np.percentile(values, [25, 50, 75])
        summary[name] = {'median': float(median), 'iqr': float(q3 - q1), 'per_fold': values.tolist()}
    return summary


# ---------------------------------------------------------------------------
# Jeu d'images
# ---------------------------------------------------------------------------

@dataclass
class ImageDataset:
    """Images multispectrales (N, 3, H, W), étiquettes et sujets."""
    images: np.ndarray
    labels: np.ndarray
    subject_ids: np.ndarray
    rows_per_channel: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=int)
        self.subject_ids = np.asarray([str(s) for s in self.subject_ids])
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ShapeError(f"Images (N, 3, H, W) attendues, forme {self.images.shape}")
        if not len(self.images) == len(self.labels) == len(self.subject_ids):
            raise ShapeError("Images, étiquettes et sujets de tailles différentes")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: np.ndarray) -> 'ImageDataset':
        return ImageDataset(self.images[indices], self.labels[indices], self.subject_ids[indices],
                            self.rows_per_channel)

    def save(self, directory: Path) -> Path:
        directory = Path(directory)
        save_blob(directory / 'images', self.images, 'f32')
        index = {'labels': self.labels.tolist(), 'subjects': self.subject_ids.tolist(),
                 'rows_per_channel': self.rows_per_channel}
        write_json(directory / 'index.json', index)
        return directory

    @classmethod
    def load(cls, directory: Path) -> 'ImageDataset':
        directory = Path(directory)
        if not (directory / 'index.json').exists():
            raise IntegrityError(f"Index d'images absent dans {directory}")
        index = read_json(directory / 'index.json')
        images = load_blob(directory / 'images')
        if len(images) != len(index['labels']):
            raise IntegrityError(f"{len(images)} images pour {len(index['labels'])} étiquettes")
        return cls(images, index['labels'], index['subjects'], int(index['rows_per_channel']))


def augment_batch(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator, cfg: TrainConfig,
                  rows_per_channel: int, num_classes: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """
    Permutation des blocs de canaux par image puis MixUp (λ ~ Beta(α, α))
    avec une permutation du lot. Réservé aux lots d'apprentissage.

    Returns:
        (images, étiquettes douces)
    """
    if not cfg.augment:
        return images, one_hot(labels, num_classes)
    shuffled = np.stack([channel_reshuffle(MultispectralImage(img, rows_per_channel), rng).pixels
                         for img in images])
    lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
    partner = rng.permutation(len(images))
    return mixup(shuffled, labels, shuffled[partner], labels[partner], lam, num_classes)


def score(model, images: np.ndarray, batch_size: int) -> np.ndarray:
    """Probabilité de la classe positive, sans augmentation."""
    return np.concatenate([predict_proba(model, batch)[:, 1] for batch in iterate_batches(images, batch_size)])


# ---------------------------------------------------------------------------
# Boucle d'entraînement
# ---------------------------------------------------------------------------

@dataclass
class TrainingReport:
    """Résultats par pli, plis interrompus et agrégats."""
    folds: List[FoldResult]
    failures: Dict[int, str]
    summary: Dict[str, dict]


class MetricsLog:
    """Journal JSON-lines, une ligne par époque et par pli."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        self.lines: List[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text('', encoding='utf-8')

    def write(self, record: dict) -> None:
        self.lines.append(record)
        if self.path:
            with open(self.path, 'a', encoding='utf-8') as f:
                f.write(json.dumps(record, sort_keys=True) + '\n')


def train_fold(model_cfg: ModelConfig, data: ImageDataset, fold: Fold, cfg: TrainConfig,
               log: MetricsLog, out_dir: Optional[Path] = None) -> FoldResult:
    """
    Entraîne un modèle sur un pli et l'évalue sur les sujets de test avec
    les poids EMA de meilleure AUCROC de validation.

    Raises:
        DivergenceError: perte non finie (pli, époque et lot indiqués)
    """
    fid = fold.fold_id
    train_idx, val_idx, val_subject = holdout_subject(
        fold, data.subject_ids, data.labels, batch_rng(cfg.seed, fid, 0, ORDER_STREAM - 1))
    model = build_model(model_cfg, np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, fid]))))
    params = model.parameters()
    state = AdamState.zeros(params)
    shadow = model.store.snapshot()
    steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    total_steps = cfg.epochs_max * steps_per_epoch
    logger.info("Pli %d : %d apprentissage, %d validation (%s), %d test",
                fid, len(train_idx), len(val_idx), val_subject, len(fold.test))

    best_auc, best_epoch, best_weights, stale, step = -math.inf, -1, shadow, 0, 0
    for epoch in range(cfg.epochs_max):
        order = batch_rng(cfg.seed, fid, epoch, ORDER_STREAM).permutation(train_idx)
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            rng = batch_rng(cfg.seed, fid, epoch, b)
            x, y = augment_batch(data.images[idx], data.labels[idx], rng, cfg, data.rows_per_channel,
                                 model_cfg.num_classes)
            with Tape() as tape:
                loss = numerics.cross_entropy(forward(model, x, 'train'), y)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"Pli {fid}, époque {epoch}, lot {b} : perte non finie")
            grads = numerics.backward(tape, loss, params)
            step += 1
            adamw_step(params, grads, state, step, cosine_lr(step - 1, total_steps, cfg.lr0), cfg)
            shadow = ema_update(shadow, model.store.snapshot(),
                                effective_decay(cfg.ema_decay, step, cfg.ema_warmup))
            losses.append(float(loss.data))

        live = model.store.snapshot()
        model.store.restore(shadow)
        val_auc = compute_metrics(score(model, data.images[val_idx], cfg.batch_size), data.labels[val_idx]).aucroc
        model.store.restore(live)
        if val_auc > best_auc:
            best_auc, best_epoch, best_weights, stale = val_auc, epoch, {k: v.copy() for k, v in shadow.items()}, 0
        else:
            stale += 1
        log.write({'fold': fid, 'epoch': epoch, 'train_loss': float(np.mean(losses)),
                   'val_aucroc': val_auc, 'lr': cosine_lr(step, total_steps, cfg.lr0)})
        logger.debug("Pli %d époque %d : perte %.4f, AUCROC val %.4f", fid, epoch, np.mean(losses), val_auc)
        if stale >= cfg.early_stop_patience:
            logger.info("Pli %d : arrêt anticipé à l'époque %d", fid, epoch)
            break

    model.store.restore(best_weights)
    result = compute_metrics(score(model, data.images[fold.test], cfg.batch_size), data.labels[fold.test], fold_id=fid)
    result.best_epoch = best_epoch
    result.test_subjects = list(fold.test_subjects)
    if out_dir is not None:
        save_checkpoint(model, Path(out_dir) / f'fold{fid}', extra={
            'fold': fid, 'best_epoch': best_epoch, 'val_aucroc': best_auc, 'val_subject': val_subject,
            'train_subjects': fold.train_subjects, 'test_subjects': fold.test_subjects,
        })
    return result


def train_loop(model_cfg: ModelConfig, data: ImageDataset, cfg: TrainConfig,
               out_dir: Optional[Path] = None) -> TrainingReport:
    """
    Validation croisée par sujet complète.

    Écrit `metrics.jsonl`, `summary.json` et un point de sauvegarde par pli
    dans `out_dir` quand il est fourni. Un pli divergent est interrompu et
    consigné ; les autres plis continuent.

    Raises:
        ShapeError: images incompatibles avec la configuration du modèle
        DivergenceError: tous les plis ont divergé
    """
    if tuple(data.images.shape[1:]) != tuple(model_cfg.input_shape):
        raise ShapeError(f"Images {data.images.shape[1:]} pour un modèle {model_cfg.input_shape}")
    out_dir = Path(out_dir) if out_dir is not None else None
    log = MetricsLog(out_dir / 'metrics.jsonl' if out_dir else None)
    folds = subject_kfold(data.subject_ids, data.labels, cfg.folds, cfg.seed)

    results, failures = [], {}
    for fold in folds:
        assert_no_leakage(fold, data.subject_ids)
        try:
            results.append(train_fold(model_cfg, data, fold, cfg, log, out_dir))
        except DivergenceError as e:
            logger.error("%s", e)
            failures[fold.fold_id] = str(e)
    if not results:
        raise DivergenceError(f"Tous les plis ont divergé : {failures}")

    summary = aggregate(results)
    if out_dir is not None:
        write_json(out_dir / 'summary.json', {
            **summary, 'variant': model_cfg.variant, 'failed_folds': failures,
            'folds': [r.to_dict() for r in results],
        })
    logger.info("AUCROC médiane %.4f (IQR %.4f)", summary['aucroc']['median'], summary['aucroc']['iqr'])
    return TrainingReport(results, failures, summary)


def evaluate_checkpoint(directory: Path, data: ImageDataset, batch_size: int = 16) -> FoldResult:
    """Réévalue un point de sauvegarde de pli sur ses sujets de test enregistrés."""
    model, extra = load_checkpoint(directory)
    test = np.flatnonzero(np.isin(data.subject_ids, extra.get('test_subjects', [])))
    if len(test) == 0:
        raise ValueError(f"Aucune époque des sujets de test de {directory}")
    result = compute_metrics(score(model, data.images[test], batch_size), data.labels[test],
                             fold_id=int(extra.get('fold', 0)))
    result.best_epoch = int(extra.get('best_epoch', -1))
    result.test_subjects = list(extra.get('test_subjects', []))
    return result
