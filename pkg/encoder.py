"""
Module d'encodage EEG : filtrage, montage bipolaire, puissance CWT fusionnée,
cartes de saillance et mise en page multispectrale 3×H×W.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage, signal

from file_operations import read_epoch_file, write_epoch_file
from numerics import ShapeError, bilinear_matrix
from wavelets import CWT_WAVELETS, cwt_1d, frequency_grid, scales_for

logger = logging.getLogger(__name__)

STANDARD_ELECTRODES = (
    'Fp1', 'Fp2', 'F7', 'F3', 'Fz', 'F4', 'F8', 'T3', 'C3', 'Cz',
    'C4', 'T4', 'T5', 'P3', 'Pz', 'P4', 'T6', 'O1', 'O2',
)

# Double banane (chaînes temporales et parasagittales, ligne médiane) puis chaînes transverses
DOUBLE_BANANA = (
    ('Fp1', 'F7'), ('F7', 'T3'), ('T3', 'T5'), ('T5', 'O1'),
    ('Fp2', 'F8'), ('F8', 'T4'), ('T4', 'T6'), ('T6', 'O2'),
    ('Fp1', 'F3'), ('F3', 'C3'), ('C3', 'P3'), ('P3', 'O1'),
    ('Fp2', 'F4'), ('F4', 'C4'), ('C4', 'P4'), ('P4', 'O2'),
    ('Fz', 'Cz'), ('Cz', 'Pz'),
    ('T3', 'C3'), ('C3', 'Cz'), ('Cz', 'C4'), ('C4', 'T4'),
    ('T5', 'P3'), ('P4', 'T6'),
)

SCHARR_X = np.array([[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]]) / 32.0
SALIENCY_BLUR_SIGMA = 2.5
FLAT_TOLERANCE = 1e-9


class EncoderConfig(BaseModel):
    """Paramètres de l'encodeur multispectral."""
    model_config = ConfigDict(frozen=True)

    fs: float = Field(250.0, gt=0)
    epoch_seconds: float = Field(4.0, gt=0)
    highpass_hz: float = Field(0.1, gt=0)
    lowpass_hz: float = Field(100.0, gt=0)
    notch_hz: Optional[float] = Field(50.0, gt=0)
    notch_q: float = Field(30.0, gt=0)
    filter_order: int = Field(4, ge=1)
    montage: Tuple[Tuple[str, str], ...] = DOUBLE_BANANA
    rows_per_channel: int = Field(32, ge=1)
    width: int = Field(256, ge=1)
    f_min: float = Field(0.5, gt=0)
    f_max: float = Field(70.0, gt=0)
    num_scales: int = Field(32, ge=2)
    log_eps: float = Field(1e-8, gt=0)

    @model_validator(mode='after')
    def _check_band(self):
        if self.f_min >= self.f_max:
            raise ValueError(f"Bande CWT vide : {self.f_min}–{self.f_max} Hz")
        if self.highpass_hz >= self.lowpass_hz:
            raise ValueError("La coupure passe-haut doit être inférieure à la coupure passe-bas")
        return self

    @classmethod
    def toy(cls, **overrides) -> 'EncoderConfig':
        """Mise en page réduite : 4 lignes par canal, soit 96 lignes pour 24 canaux."""
        return cls(**{'rows_per_channel': 4, **overrides})

    @property
    def height(self) -> int:
        return len(self.montage) * self.rows_per_channel

    @property
    def samples_per_epoch(self) -> int:
        return int(round(self.fs * self.epoch_seconds))


@dataclass
class EegEpoch:
    """Fenêtre EEG multicanal : T échantillons × C canaux (µV)."""
    samples: np.ndarray
    fs: float
    subject_id: str
    label: int
    channel_names: List[str]

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ShapeError(f"Époque attendue T×C, reçue {self.samples.shape}")
        if self.samples.shape[1] != len(self.channel_names):
            raise ShapeError(f"{self.samples.shape[1]} colonnes pour {len(self.channel_names)} canaux nommés")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"Époque non finie (sujet {self.subject_id})")
        if self.fs <= 0:
            raise ValueError(f"Fréquence d'échantillonnage invalide : {self.fs}")
        if self.label not in (0, 1):
            raise ValueError(f"Étiquette invalide : {self.label}")
        self.channel_names = list(self.channel_names)

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.fs

    def replace(self, samples: np.ndarray, channel_names: Optional[Sequence[str]] = None) -> 'EegEpoch':
        return EegEpoch(samples, self.fs, self.subject_id, self.label,
                        list(channel_names) if channel_names is not None else self.channel_names)


@dataclass
class MultispectralImage:
    """
    Représentation 3×H×W : plan 0 = puissance log fusionnée normalisée,
    plan 1 = SA₁ (résidu spectral), plan 2 = SA₂ (gradient de Scharr).

    block_order[k] est l'indice de montage du canal placé au bloc k.
    """
    pixels: np.ndarray
    rows_per_channel: int
    block_order: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ShapeError(f"Image multispectrale 3×H×W attendue, reçue {self.pixels.shape}")
        if self.pixels.shape[1] % self.rows_per_channel:
            raise ShapeError(f"Hauteur {self.pixels.shape[1]} non divisible par {self.rows_per_channel}")
        if not self.block_order:
            self.block_order = tuple(range(self.num_blocks))

    @property
    def num_blocks(self) -> int:
        return self.pixels.shape[1] // self.rows_per_channel

    def block(self, k: int) -> np.ndarray:
        r = self.rows_per_channel
        return self.pixels[:, k * r:(k + 1) * r]


@dataclass(frozen=True)
class MontageSpec:
    """Paires (anode, cathode) ordonnées."""
    pairs: Tuple[Tuple[str, str], ...] = DOUBLE_BANANA

    @property
    def names(self) -> List[str]:
        return [f"{a}-{c}" for a, c in self.pairs]

    def __len__(self) -> int:
        return len(self.pairs)


# ---------------------------------------------------------------------------
# Filtrage et montage
# ---------------------------------------------------------------------------

def design_filters(cfg: EncoderConfig) -> np.ndarray:
    """
    Cascade SOS passe-bande : passe-haut puis passe-bas.

    Raises:
        ValueError: fs inférieure à deux fois la coupure passe-bas
    """
    if cfg.fs < 2 * cfg.lowpass_hz:
        raise ValueError(f"fs = {cfg.fs} Hz insuffisante pour une coupure passe-bas à {cfg.lowpass_hz} Hz")
    sections = [
        signal.butter(cfg.filter_order, cfg.highpass_hz, btype='highpass', fs=cfg.fs, output='sos'),
    ]
    if cfg.lowpass_hz < cfg.fs / 2:
        sections.append(signal.butter(cfg.filter_order, cfg.lowpass_hz, btype='lowpass', fs=cfg.fs, output='sos'))
    return np.concatenate(sections, axis=0)


def design_notch(cfg: EncoderConfig) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Coupe-bande (b, a) du secteur, ou None s'il est désactivé ou au-delà de Nyquist."""
    if cfg.notch_hz is None or cfg.notch_hz >= cfg.fs / 2:
        return None
    return signal.iirnotch(cfg.notch_hz, cfg.notch_q, fs=cfg.fs)


def preprocess(epoch: EegEpoch, cfg: Optional[EncoderConfig] = None) -> EegEpoch:
    """
    Filtrage à phase nulle (aller-retour) puis suppression de la tendance linéaire.

    Le coupe-bande passe en premier avec les conditions initiales de
    Gustafsson : une sinusoïde secteur pure est annulée sans transitoire
    aux bords. Le passe-bande suit, sur l'époque prolongée par réflexion
    paire de toute sa longueur (aucune marche de niveau aux raccords).

    Args:
        epoch: Époque brute
        cfg: Configuration (fs de l'époque prioritaire)

    Returns:
        Nouvelle époque filtrée
    """
    cfg = (cfg or EncoderConfig()).model_copy(update={'fs': epoch.fs})
    sos = design_filters(cfg)
    notch = design_notch(cfg)
    samples = epoch.samples
    if notch is not None:
        samples = signal.filtfilt(*notch, samples, axis=0, method='gust')
    filtered = signal.sosfiltfilt(sos, samples, axis=0, padtype='even', padlen=samples.shape[0] - 1)
    filtered = signal.detrend(filtered, axis=0, type='linear')
    logger.debug("Époque %s filtrée (%d sections, coupe-bande %s)", epoch.subject_id, sos.shape[0],
                 'actif' if notch is not None else 'inactif')
    return epoch.replace(filtered)



def apply_montage(epoch: EegEpoch, spec: Optional[MontageSpec] = None) -> EegEpoch:
    """
    Re-référencement bipolaire : canal k = anode_k − cathode_k.

    Raises:
        ValueError: électrode absente de l'époque
    """
    spec = spec or MontageSpec()
    index = {name: i for i, name in enumerate(epoch.channel_names)}
    for anode, cathode in spec.pairs:
        for name in (anode, cathode):
            if name not in index:
                raise ValueError(f"Électrode absente de l'époque : {name}")
    anodes = [index[a] for a, _ in spec.pairs]
    cathodes = [index[c] for _, c in spec.pairs]
    return epoch.replace(epoch.samples[:, anodes] - epoch.samples[:, cathodes], spec.names)


# ---------------------------------------------------------------------------
# Puissance CWT et saillance
# ---------------------------------------------------------------------------

def fused_log_power(x: np.ndarray, fs: float, cfg: EncoderConfig) -> np.ndarray:
    """Σ_i log(|W_ψi x|² + ε) sur DoG, Paul et Morlet, lignes alignées en fréquence."""
    freqs = frequency_grid(cfg.f_min, cfg.f_max, cfg.num_scales)
    total = np.zeros((cfg.num_scales, x.size))
    for name in CWT_WAVELETS:
        coeffs = cwt_1d(x, name, scales_for(name, freqs), 1.0 / fs).coefficients
        total += np.log(np.abs(coeffs) ** 2 + cfg.log_eps)
    return total


def _resize(plane: np.ndarray, rows: int, cols: int) -> np.ndarray:
    ah = bilinear_matrix(plane.shape[0], rows, np.float64)
    aw = bilinear_matrix(plane.shape[1], cols, np.float64)
    return ah @ plane @ aw.T


def _is_flat(plane: np.ndarray) -> bool:
    scale = max(float(np.max(np.abs(plane))), 1.0)
    return float(np.ptp(plane)) <= FLAT_TOLERANCE * scale


def _minmax(plane: np.ndarray) -> np.ndarray:
    """Normalisation min-max dans [0, 1] ; un plan plat donne 0."""
    if _is_flat(plane):
        return np.zeros_like(plane)
    return (plane - plane.min()) / np.ptp(plane)


def spectral_residual_saliency(plane: np.ndarray) -> np.ndarray:
    """
    SA₁ : résidu spectral (log-amplitude moins sa moyenne 3×3), retour spatial,
    carré, flou gaussien puis min-max.
    """
    if _is_flat(plane):
        return np.zeros_like(plane)
    spectrum = np.fft.fft2(plane)
    log_amplitude = np.log(np.abs(spectrum) + 1e-12)
    residual = log_amplitude - ndimage.uniform_filter(log_amplitude, size=3, mode='wrap')
    saliency = np.abs(np.fft.ifft2(np.exp(residual + 1j * np.angle(spectrum)))) ** 2
    return _minmax(ndimage.gaussian_filter(saliency, SALIENCY_BLUR_SIGMA, mode='wrap'))


def gradient_saliency(plane: np.ndarray) -> np.ndarray:
    """SA₂ : module du gradient de Scharr, min-max."""
    gx = ndimage.correlate(plane, SCHARR_X, mode='nearest')
    gy = ndimage.correlate(plane, SCHARR_X.T, mode='nearest')
    return _minmax(np.hypot(gx, gy))


def encode_multispectral(epoch: EegEpoch, cfg: Optional[EncoderConfig] = None) -> MultispectralImage:
    """
    Image multispectrale d'une époque filtrée et montée.

    Chaque canal donne un bloc rows_per_channel × width de puissance log
    fusionnée, normalisé en norme l2 ; les blocs sont empilés dans l'ordre
    du montage, puis SA₁ et SA₂ sont calculées sur le plan complet.

    Raises:
        ShapeError: nombre de canaux différent de la mise en page
    """
    cfg = cfg or EncoderConfig()
    n_channels = epoch.samples.shape[1]
    if n_channels != len(cfg.montage):
        raise ShapeError(f"Mise en page pour {len(cfg.montage)} canaux, époque à {n_channels} canaux")

    rows = cfg.rows_per_channel
    plane = np.empty((cfg.height, cfg.width))
    for c in range(n_channels):
        block = _resize(fused_log_power(epoch.samples[:, c], epoch.fs, cfg), rows, cfg.width)
        plane[c * rows:(c + 1) * rows] = block / np.linalg.norm(block)

    pixels = np.stack([plane, spectral_residual_saliency(plane), gradient_saliency(plane)])
    return MultispectralImage(pixels.astype(np.float32), rows)


def encode_epoch(epoch: EegEpoch, cfg: Optional[EncoderConfig] = None) -> MultispectralImage:
    """Chaîne complète : filtrage, montage bipolaire, encodage."""
    cfg = cfg or EncoderConfig()
    if epoch.samples.shape[0] != cfg.samples_per_epoch:
        logger.warning("Époque de %d échantillons (attendu %d)", epoch.samples.shape[0], cfg.samples_per_epoch)
    montaged = apply_montage(preprocess(epoch, cfg), MontageSpec(cfg.montage))
    return encode_multispectral(montaged, cfg)


# ---------------------------------------------------------------------------
# Augmentations
# ---------------------------------------------------------------------------

def _permute_blocks(img: MultispectralImage, perm: Sequence[int]) -> MultispectralImage:
    r = img.rows_per_channel
    rows = np.concatenate([np.arange(p * r, (p + 1) * r) for p in perm])
    order = tuple(img.block_order[p] for p in perm)
    return MultispectralImage(img.pixels[:, rows].copy(), r, order)


def channel_reshuffle(img: MultispectralImage, rng) -> MultispectralImage:
    """
    Permutation aléatoire uniforme des blocs de canaux, identique sur les trois plans.

    Le bloc k de la sortie est le bloc perm[k] de l'entrée.
    """
    perm = np.asarray(rng.permutation(img.num_blocks))
    return _permute_blocks(img, perm)


def inverse_reshuffle(img: MultispectralImage, perm: Sequence[int]) -> MultispectralImage:
    """Annule `channel_reshuffle` de permutation `perm`."""
    return _permute_blocks(img, np.argsort(np.asarray(perm)))


def one_hot(label: Union[int, np.ndarray], num_classes: int = 2) -> np.ndarray:
    label = np.asarray(label)
    if label.ndim >= 1 and label.shape[-1] == num_classes and label.dtype.kind == 'f':
        return label
    return np.eye(num_classes)[label.astype(int)]


def mixup(a: np.ndarray, label_a, b: np.ndarray, label_b, lam: float,
          num_classes: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """
    λ·a + (1−λ)·b sur les pixels et les étiquettes one-hot.

    Returns:
        (pixels mélangés, étiquette douce)
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"λ doit être dans [0, 1] (reçu {lam})")
    a, b = np.asarray(a), np.asarray(b)
    ya, yb = one_hot(label_a, num_classes), one_hot(label_b, num_classes)
    if a.shape != b.shape or ya.shape != yb.shape:
        raise ShapeError(f"mixup : formes incompatibles {a.shape} / {b.shape}")
    return lam * a + (1.0 - lam) * b, lam * ya + (1.0 - lam) * yb


# ---------------------------------------------------------------------------
# Fichiers d'époques
# ---------------------------------------------------------------------------

def write_epoch(epoch: EegEpoch, stem: Path) -> Path:
    """Écrit une époque (en-tête JSON + f32 canal par canal)."""
    header = {'fs': epoch.fs, 'channels': epoch.channel_names, 'subject': epoch.subject_id, 'label': epoch.label}
    return write_epoch_file(stem, epoch.samples, header)


def read_epoch(stem: Path) -> EegEpoch:
    """Lit une époque écrite par `write_epoch`."""
    header, samples = read_epoch_file(stem)
    return EegEpoch(samples, float(header['fs']), str(header['subject']), int(header['label']), header['channels'])
