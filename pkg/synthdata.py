"""
Module de données synthétiques : corpus EEG multi-sujets déterministe
(fond en 1/f + rythme alpha, complexes pointe-onde injectés), audits de
séparabilité et d'hétérogénéité, textures en loi de puissance.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import signal
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import GroupKFold, cross_val_predict
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from encoder import STANDARD_ELECTRODES, EegEpoch, write_epoch
from file_operations import write_json
from parallel_processor import process_parallel, raise_on_failure

logger = logging.getLogger(__name__)

AUDIT_RANGE = (0.85, 0.999)
AUDIT_BANDS = ((1.0, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 30.0), (30.0, 70.0))
DISCHARGE_BAND = (2.0, 5.0)
SPIKE_WIDTHS_MS = (50.0, 60.0, 70.0, 80.0)
HETEROGENEITY_KS = 0.05


class SynthSpec(BaseModel):
    """Description d'un corpus synthétique ; le corpus est une fonction pure de la spec."""
    model_config = ConfigDict(frozen=True)

    n_subjects: int = Field(10, ge=2)
    epochs_per_subject: int = Field(40, ge=1)
    seizure_fraction: float = Field(0.5, gt=0, lt=1)
    fs: float = Field(250.0, gt=0)
    epoch_seconds: float = Field(4.0, gt=0)
    electrodes: Tuple[str, ...] = STANDARD_ELECTRODES
    spike_wave_freq: Tuple[float, float] = (2.5, 4.0)
    snr_db: Tuple[float, float] = (-3.0, 3.0)
    background_uv: float = Field(20.0, gt=0)
    exponent_range: Tuple[float, float] = (0.8, 1.4)
    alpha_range: Tuple[float, float] = (8.0, 12.0)
    burst_seconds: Tuple[float, float] = (1.5, 3.0)
    inject_discharges: bool = True
    seed: int = Field(0, ge=0)

    @model_validator(mode='after')
    def _check_ranges(self):
        for name in ('spike_wave_freq', 'snr_db', 'exponent_range', 'alpha_range', 'burst_seconds'):
            low, high = getattr(self, name)
            if low > high:
                raise ValueError(f"{name} : borne basse {low} > borne haute {high}")
        if self.burst_seconds[1] > self.epoch_seconds:
            raise ValueError("Salve plus longue que l'époque")
        if len(self.electrodes) < 3:
            raise ValueError("Au moins 3 électrodes requises")
        return self

    @property
    def samples_per_epoch(self) -> int:
        return int(round(self.fs * self.epoch_seconds))

    @property
    def positives_per_subject(self) -> int:
        return int(round(self.seizure_fraction * self.epochs_per_subject))


def _generator(*words: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(words))))


# ---------------------------------------------------------------------------
# Profils de sujets et fond
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubjectProfile:
    """Paramètres du fond propres à un sujet."""
    subject_id: str
    index: int
    exponent: float
    alpha_freq: float
    alpha_gain: float
    channel_gain: np.ndarray
    alpha_topography: np.ndarray


def _spread(rng: np.random.Generator, n: int, low: float, high: float) -> np.ndarray:
    """n valeurs régulièrement espacées dans [low, high], légèrement perturbées et permutées."""
    if n == 1 or low == high:
        return np.full(n, (low + high) / 2)
    step = (high - low) / n
    values = low + step * (np.arange(n) + 0.5 + rng.uniform(-0.2, 0.2, n))
    return values[rng.permutation(n)]


def subject_profiles(spec: SynthSpec) -> List[SubjectProfile]:
    rng = _generator(spec.seed)
    exponents = _spread(rng, spec.n_subjects, *spec.exponent_range)
    alphas = _spread(rng, spec.n_subjects, *spec.alpha_range)
    c = len(spec.electrodes)
    # Alpha plus fort en postérieur : les électrodes sont rangées d'avant en arrière
    posterior = np.linspace(0.3, 1.0, c)
    profiles = []
    for s in range(spec.n_subjects):
        profiles.append(SubjectProfile(
            subject_id=f"sub{s:02d}", index=s,
            exponent=float(exponents[s]), alpha_freq=float(alphas[s]),
            alpha_gain=float(rng.uniform(0.5, 1.5)),
            channel_gain=rng.uniform(0.7, 1.3, c),
            alpha_topography=posterior * rng.uniform(0.6, 1.0, c),
        ))
    return profiles


def colored_noise(rng: np.random.Generator, n: int, channels: int, fs: float, exponent: float) -> np.ndarray:
    """Bruit (n, channels) de densité spectrale en 1/f^exponent, RMS unitaire par canal."""
    white = np.fft.rfft(rng.standard_normal((channels, n)), axis=-1)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    freqs[0] = freqs[1]
    shaped = np.fft.irfft(white * freqs ** (-exponent / 2.0), n=n, axis=-1)
    shaped -= shaped.mean(axis=-1, keepdims=True)
    return (shaped / shaped.std(axis=-1, keepdims=True)).T


def background(spec: SynthSpec, profile: SubjectProfile, rng: np.random.Generator) -> np.ndarray:
    """Fond T×C : bruit en 1/f et rythme alpha de phase aléatoire (µV)."""
    n, c = spec.samples_per_epoch, len(spec.electrodes)
    t = np.arange(n) / spec.fs
    noise = colored_noise(rng, n, c, spec.fs, profile.exponent)
    phase = rng.uniform(0, 2 * math.pi, c)
    alpha = np.sqrt(2) * np.sin(2 * math.pi * profile.alpha_freq * t[:, None] + phase)
    mix = noise + profile.alpha_gain * profile.alpha_topography * alpha
    return spec.background_uv * profile.channel_gain * mix


# ---------------------------------------------------------------------------
# Complexes pointe-onde
# ---------------------------------------------------------------------------

def spike_wave_template(fs: float, freq: float, spike_ms: float, duration: float) -> np.ndarray:
    """
    Train de complexes pointe-onde : pointe triangulaire de `spike_ms` puis
    onde lente d'une demi-période de sinus sur le reste du cycle.
    """
    t = np.arange(int(round(duration * fs))) / fs
    period = 1.0 / freq
    width = spike_ms / 1000.0
    if width >= period:
        raise ValueError(f"Pointe de {spike_ms} ms plus longue que le cycle à {freq} Hz")
    tau = np.mod(t, period)
    spike = np.where(tau < width, 1.0 - np.abs(2.0 * tau / width - 1.0), 0.0)
    wave = np.where(tau >= width, -0.5 * np.sin(math.pi * (tau - width) / (period - width)), 0.0)
    return -(spike + wave)


@dataclass(frozen=True)
class Discharge:
    freq: float
    spike_ms: float
    onset: float
    duration: float
    first_channel: int
    n_channels: int
    snr_db: float


def draw_discharge(spec: SynthSpec, rng: np.random.Generator) -> Discharge:
    c = len(spec.electrodes)
    n_channels = int(rng.integers(3, min(8, c) + 1))
    duration = float(rng.uniform(*spec.burst_seconds))
    return Discharge(
        freq=float(rng.uniform(*spec.spike_wave_freq)),
        spike_ms=float(SPIKE_WIDTHS_MS[int(rng.integers(len(SPIKE_WIDTHS_MS)))]),
        onset=float(rng.uniform(0.0, spec.epoch_seconds - duration)),
        duration=duration,
        first_channel=int(rng.integers(0, c - n_channels + 1)),
        n_channels=n_channels,
        snr_db=float(rng.uniform(*spec.snr_db)),
    )


def inject(samples: np.ndarray, discharge: Discharge, fs: float) -> np.ndarray:
    """Ajoute une salve pointe-onde sur un sous-ensemble contigu d'électrodes."""
    out = samples.copy()
    burst = spike_wave_template(fs, discharge.freq, discharge.spike_ms, discharge.duration)
    burst = burst * signal.windows.tukey(len(burst), 0.2)
    burst /= np.sqrt(np.mean(burst ** 2))
    start = int(round(discharge.onset * fs))
    stop = min(start + len(burst), len(out))
    weights = signal.windows.hann(discharge.n_channels + 2)[1:-1]
    channels = range(discharge.first_channel, discharge.first_channel + discharge.n_channels)
    gain = 10.0 ** (discharge.snr_db / 20.0)
    for w, ch in zip(weights, channels):
        rms = np.sqrt(np.mean(samples[:, ch] ** 2))
        out[start:stop, ch] += gain * rms * w / weights.max() * burst[:stop - start]
    return out


def synthesize_epoch(spec: SynthSpec, profile: SubjectProfile, epoch_index: int, label: int,
                     inject_discharge: Optional[bool] = None) -> EegEpoch:
    """
    Époque déterministe de (graine, sujet, indice). La salve est tirée dans
    tous les cas pour que l'époque positive et son jumeau sans salve
    partagent le même fond.
    """
    rng = _generator(spec.seed, profile.index, epoch_index)
    samples = background(spec, profile, rng)
    discharge = draw_discharge(spec, rng)
    if inject_discharge is None:
        inject_discharge = bool(label) and spec.inject_discharges
    if inject_discharge:
        samples = inject(samples, discharge, spec.fs)
    return EegEpoch(samples, spec.fs, profile.subject_id, int(label), list(spec.electrodes))


def subject_labels(spec: SynthSpec, profile: SubjectProfile) -> np.ndarray:
    """Exactement round(fraction × époques) positifs par sujet."""
    labels = np.zeros(spec.epochs_per_subject, dtype=int)
    positives = _generator(spec.seed, profile.index, 2 ** 31).permutation(spec.epochs_per_subject)
    labels[positives[:spec.positives_per_subject]] = 1
    return labels


def generate_subject(spec: SynthSpec, profile: SubjectProfile) -> List[EegEpoch]:
    labels = subject_labels(spec, profile)
    return [synthesize_epoch(spec, profile, k, labels[k]) for k in range(spec.epochs_per_subject)]


def generate_epochs(spec: SynthSpec, max_workers: int = 1) -> List[EegEpoch]:
    """Toutes les époques, sujet par sujet, dans un ordre indépendant du parallélisme."""
    results = process_parallel(subject_profiles(spec), lambda p: generate_subject(spec, p), max_workers)
    return [epoch for subject in raise_on_failure(results, "sujet") for epoch in subject]


def generate_corpus(spec: SynthSpec, out_dir: Path, max_workers: int = 1) -> List[Path]:
    """
    Écrit le corpus : un fichier d'époque par fenêtre et `corpus.json`.

    Returns:
        Chemins (sans extension) des époques, dans l'ordre sujet puis indice
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = generate_epochs(spec, max_workers)
    stems, index = [], []
    per_subject: Dict[str, int] = {}
    for epoch in epochs:
        k = per_subject.get(epoch.subject_id, 0)
        per_subject[epoch.subject_id] = k + 1
        stem = out_dir / f"{epoch.subject_id}_e{k:03d}"
        write_epoch(epoch, stem)
        stems.append(stem)
        index.append({'file': stem.name, 'subject': epoch.subject_id, 'label': epoch.label})
    write_json(out_dir / 'corpus.json', {'spec': spec.model_dump(mode='json'), 'epochs': index})
    logger.info("Corpus écrit : %d époques, %d sujets dans %s", len(epochs), spec.n_subjects, out_dir)
    return stems


# ---------------------------------------------------------------------------
# Audits
# ---------------------------------------------------------------------------

def welch_psd(samples: np.ndarray, fs: float) -> Tuple[np.ndarray, np.ndarray]:
    """Densité spectrale de Welch par canal (fenêtres d'une seconde)."""
    nperseg = min(int(fs), samples.shape[0])
    return signal.welch(samples, fs=fs, nperseg=nperseg, axis=0)


def bandpower_ratio(samples: np.ndarray, fs: float, band: Tuple[float, float] = DISCHARGE_BAND) -> float:
    """Puissance dans la bande sur puissance totale, tous canaux confondus."""
    freqs, psd = welch_psd(samples, fs)
    total = psd.sum(axis=1)
    mask = (freqs >= band[0]) & (freqs <= band[1])
    return float(total[mask].sum() / total.sum())


def _log_bandpowers(freqs: np.ndarray, psd: np.ndarray, bands: Sequence[Tuple[float, float]]) -> np.ndarray:
    return np.stack([np.log(psd[(freqs >= lo) & (freqs < hi)].sum(axis=0) + 1e-12) for lo, hi in bands])


def bandpower_features(epoch: EegEpoch, bands: Sequence[Tuple[float, float]] = AUDIT_BANDS) -> np.ndarray:
    """Log-puissance par canal et par bande, tableau (bandes, canaux)."""
    return _log_bandpowers(*welch_psd(epoch.samples, epoch.fs), bands)


def line_length(samples: np.ndarray) -> np.ndarray:
    """Longueur de ligne par canal : moyenne de |x[t+1] − x[t]|."""
    return np.mean(np.abs(np.diff(samples, axis=0)), axis=0)


def _channel_contrast(values: np.ndarray) -> np.ndarray:
    """Écart entre le canal le plus fort et le canal médian (le long du dernier axe)."""
    return values.max(axis=-1) - np.median(values, axis=-1)


def audit_features(epoch: EegEpoch) -> np.ndarray:
    """
    Descripteurs de l'audit, indépendants de la position des électrodes
    touchées : contraste inter-canaux des log-puissances de bande, forme
    spectrale médiane, part de la bande des décharges et longueur de ligne.
    """
    freqs, psd = welch_psd(epoch.samples, epoch.fs)
    bands = _log_bandpowers(freqs, psd, AUDIT_BANDS)
    log_total = np.log(psd.sum(axis=0) + 1e-12)
    discharge = _log_bandpowers(freqs, psd, (DISCHARGE_BAND,))[0]
    log_ll = np.log(line_length(epoch.samples) + 1e-12)
    return np.concatenate([
        _channel_contrast(bands),
        np.median(bands - log_total, axis=-1),
        [_channel_contrast(discharge), _channel_contrast(discharge - log_total), _channel_contrast(log_ll)],
    ])


@dataclass
class AuditReport:
    aucroc: float
    accepted: bool
    reason: str
    n_epochs: int
    n_subjects: int


def class_separability_audit(epochs: Sequence[EegEpoch], accept: Tuple[float, float] = AUDIT_RANGE,
                             folds: int = 5) -> AuditReport:
    """
    Régression logistique sur `audit_features`, prédictions croisées par
    sujet ; le corpus est accepté si l'AUCROC est dans `accept`.
    """
    labels = np.array([e.label for e in epochs])
    groups = np.array([e.subject_id for e in epochs])
    n_subjects = len(set(groups.tolist()))
    if len(np.unique(labels)) < 2 or n_subjects < 2:
        return AuditReport(float('nan'), False, "corpus dégénéré (une classe ou un seul sujet)",
                           len(epochs), n_subjects)
    features = np.stack([audit_features(e) for e in epochs])
    classifier = make_pipeline(StandardScaler(), LogisticRegression(max_iter=1000))
    scores = cross_val_predict(classifier, features, labels, groups=groups,
                               cv=GroupKFold(n_splits=min(folds, n_subjects)), method='predict_proba')[:, 1]
    auc = float(roc_auc_score(labels, scores))
    if auc < accept[0]:
        accepted, reason = False, f"trop difficile (AUCROC {auc:.4f} < {accept[0]})"
    elif auc > accept[1]:
        accepted, reason = False, f"trop facile (AUCROC {auc:.4f} > {accept[1]})"
    else:
        accepted, reason = True, f"accepté (AUCROC {auc:.4f})"
    logger.info("Audit de séparabilité : %s", reason)
    return AuditReport(auc, accepted, reason, len(epochs), n_subjects)


def _normalized_spectrum(epochs: Sequence[EegEpoch]) -> np.ndarray:
    spectra = []
    for e in epochs:
        freqs, psd = welch_psd(e.samples, e.fs)
        spectra.append(psd[freqs > 0].mean(axis=1))
    mean = np.mean(spectra, axis=0)
    return mean / mean.sum()


def subject_spectral_distance(epochs_a: Sequence[EegEpoch], epochs_b: Sequence[EegEpoch]) -> float:
    """Distance de Kolmogorov-Smirnov entre spectres de fond normalisés de deux sujets."""
    a, b = _normalized_spectrum(epochs_a), _normalized_spectrum(epochs_b)
    if a.shape != b.shape:
        raise ValueError("Spectres de résolutions différentes")
    return float(np.max(np.abs(np.cumsum(a) - np.cumsum(b))))


def heterogeneity_audit(epochs: Sequence[EegEpoch], threshold: float = HETEROGENEITY_KS) -> float:
    """Fraction des paires de sujets dont les spectres de fond diffèrent de plus du seuil."""
    by_subject: Dict[str, List[EegEpoch]] = {}
    for e in epochs:
        if e.label == 0:
            by_subject.setdefault(e.subject_id, []).append(e)
    pairs = list(itertools.combinations(sorted(by_subject), 2))
    if not pairs:
        raise ValueError("Au moins deux sujets avec des époques de fond requis")
    distances = [subject_spectral_distance(by_subject[a], by_subject[b]) for a, b in pairs]
    return float(np.mean(np.array(distances) > threshold))


# ---------------------------------------------------------------------------
# Textures
# ---------------------------------------------------------------------------

def power_law_texture(rng: np.random.Generator, size: int = 64, exponent: float = 2.0) -> np.ndarray:
    """Champ aléatoire de spectre en 1/f^exponent, centré réduit."""
    wy, wx = np.meshgrid(np.fft.fftfreq(size), np.fft.fftfreq(size), indexing='ij')
    radius = np.hypot(wy, wx)
    radius[0, 0] = 1.0
    spectrum = (rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))) / radius ** (exponent / 2)
    spectrum[0, 0] = 0
    field = np.fft.ifft2(spectrum).real
    return (field - field.mean()) / field.std()


def texture_suite(count: int, seed: int = 0, size: int = 64) -> List[np.ndarray]:
    """Textures à moyenne positive et fluctuations en loi de puissance."""
    rng = np.random.default_rng(seed)
    return [1.0 + 0.3 * power_law_texture(rng, size) for _ in range(count)]
