"""
Module d'analyse : spectres radiaux des cartes de caractéristiques et des
branches d'attention, terme de borne de complexité gaussienne, vérification
des régimes de corrélation (carte de Morlet, caractéristiques de Fourier)
et export des activations.
"""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

import numerics
from file_operations import sanitize_filename, save_blob, write_json
from model import Model, forward
from numerics import ShapeError
from scattering import scattering_transform
from wavelets import FilterBank, MorletParams, morlet_feature_map, morlet_lipschitz_constant

logger = logging.getLogger(__name__)

HF_CUTOFF = 0.25
MIN_SPECTRUM_SIZE = 3
MIN_PAIR_DISTANCE = 1e-6
UNIT_NORM_TOLERANCE = 1e-6


# ---------------------------------------------------------------------------
# Spectres radiaux
# ---------------------------------------------------------------------------

@dataclass
class SpectrumProfile:
    """
    Profil radial d'une carte de caractéristiques.

    `energy` contient l'énergie linéaire de chaque anneau (somme sur les
    canaux) ; `magnitude` le logarithme du module moyen.
    """
    radial_freq: np.ndarray
    magnitude: np.ndarray
    energy: np.ndarray
    hf_ratio: float
    hf_cutoff: float = HF_CUTOFF

    def rows(self, branch: str) -> List[Tuple[float, float, str]]:
        return [(float(f), float(m), branch) for f, m in zip(self.radial_freq, self.magnitude)]


def _radius(h: int, w: int) -> np.ndarray:
    fy, fx = np.meshgrid(np.fft.fftfreq(h), np.fft.fftfreq(w), indexing='ij')
    return np.hypot(fy, fx)


def _accumulate(maps: np.ndarray, hf_cutoff: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float, float]:
    """Sommes par anneau sur un paquet de cartes (..., H, W)."""
    h, w = maps.shape[-2:]
    if min(h, w) < MIN_SPECTRUM_SIZE:
        raise ShapeError(f"Carte {h}×{w} trop petite pour un spectre radial (minimum {MIN_SPECTRUM_SIZE})")
    n_bins = min(h, w) // 2
    radius = _radius(h, w)
    bins = np.minimum((radius / 0.5 * n_bins).astype(int), n_bins - 1).ravel()

    spectrum = np.fft.fft2(maps.reshape(-1, h, w).astype(np.float64), norm='ortho')
    power = (np.abs(spectrum) ** 2).reshape(-1, h * w)
    modulus = np.abs(spectrum).reshape(-1, h * w)
    energy = np.bincount(bins, weights=power.sum(axis=0), minlength=n_bins)
    mod_sum = np.bincount(bins, weights=modulus.sum(axis=0), minlength=n_bins)
    counts = np.bincount(bins, minlength=n_bins) * modulus.shape[0]
    high = float(power[:, radius.ravel() > hf_cutoff].sum())
    return energy, mod_sum, counts, high, float(power.sum())


def _profile(energy, mod_sum, counts, high, total, hf_cutoff) -> SpectrumProfile:
    n_bins = len(energy)
    magnitude = np.log(mod_sum / np.maximum(counts, 1) + 1e-12)
    ratio = high / total if total > 0 else 0.0
    return SpectrumProfile(np.arange(n_bins) * 0.5 / n_bins, magnitude, energy, ratio, hf_cutoff)


def radial_spectrum(feature_map: np.ndarray, hf_cutoff: float = HF_CUTOFF) -> SpectrumProfile:
    """
    Spectre de Fourier d'une carte C×H×W, moyenné sur les canaux et regroupé
    en ⌊min(H, W)/2⌋ anneaux de fréquence normalisée dans [0, 0,5].

    Les fréquences au-delà de 0,5 (coins) vont dans le dernier anneau, de
    sorte que la somme de `energy` égale l'énergie de la carte.
    """
    maps = np.asarray(feature_map)
    if maps.ndim == 2:
        maps = maps[None]
    if maps.ndim != 3:
        raise ShapeError(f"Carte C×H×W attendue, forme {maps.shape}")
    return _profile(*_accumulate(maps, hf_cutoff), hf_cutoff)


def batch_spectrum(maps: np.ndarray, hf_cutoff: float = HF_CUTOFF) -> SpectrumProfile:
    """Profil moyen d'un lot (N, C, H, W) ; hf_ratio sur les énergies cumulées."""
    maps = np.asarray(maps)
    if maps.ndim != 4:
        raise ShapeError(f"Lot (N, C, H, W) attendu, forme {maps.shape}")
    energy, mod_sum, counts, high, total = _accumulate(maps, hf_cutoff)
    return _profile(energy / len(maps), mod_sum, counts, high, total, hf_cutoff)


def high_frequency_area(h: int, w: int, hf_cutoff: float = HF_CUTOFF) -> float:
    """Fraction des fréquences discrètes au-delà du seuil."""
    return float(np.mean(_radius(h, w) > hf_cutoff))


@dataclass
class BranchReport:
    """
    Spectres des deux branches d'un bloc FAA et de sa sortie fusionnée.

    `high` est mesuré sur la grille propre de X_h' (H/2 × W/2) ; `high_upsampled`
    après suréchantillonnage bilinéaire, qui ramène tout son contenu sous 0,25.
    """
    stage: int
    block: int
    high: SpectrumProfile
    low: SpectrumProfile
    fused: SpectrumProfile
    high_upsampled: SpectrumProfile

    @property
    def hf_difference(self) -> float:
        return self.high.hf_ratio - self.low.hf_ratio


def _capture(model: Model, batch: np.ndarray) -> Dict[str, np.ndarray]:
    capture: Dict[str, np.ndarray] = {}
    with numerics.no_record():
        forward(model, batch, 'eval', capture)
    return capture


def _check_stage(stage: int) -> None:
    if stage not in (1, 2, 3, 4):
        raise ValueError(f"Étage {stage} inexistant (1 à 4)")


def branch_spectrum_report(model: Model, batch: np.ndarray, stage: int = 4,
                           hf_cutoff: float = HF_CUTOFF) -> BranchReport:
    """
    Spectres de X_h' et X_l' au dernier bloc d'un étage, chacun en fréquence
    normalisée sur sa propre grille.

    Raises:
        ValueError: variante sans FAA ou étage inexistant
    """
    _check_stage(stage)
    if model.cfg.preset.mixer != 'faa':
        raise ValueError(f"{model.cfg.variant} n'a pas de blocs FAA (pas de branches à analyser)")
    block = len(model.stages[stage - 1].blocks) - 1
    capture = _capture(model, batch)
    prefix = f'stage{stage}.block{block}'
    report = BranchReport(
        stage, block,
        batch_spectrum(capture[f'{prefix}.high_branch'], hf_cutoff),
        batch_spectrum(capture[f'{prefix}.low_branch'], hf_cutoff),
        batch_spectrum(capture[f'{prefix}.fused'], hf_cutoff),
        batch_spectrum(capture[f'{prefix}.high_branch_up'], hf_cutoff),
    )
    logger.info("Étage %d : hf_ratio haute %.4f, basse %.4f", stage, report.high.hf_ratio, report.low.hf_ratio)
    return report


def stage_spectrum(model: Model, batch: np.ndarray, stage: int = 4, hf_cutoff: float = HF_CUTOFF) -> SpectrumProfile:
    """Spectre de la sortie d'un étage, pour toute variante."""
    _check_stage(stage)
    return batch_spectrum(_capture(model, batch)[f'stage{stage}'], hf_cutoff)


def write_spectrum_csv(profiles: Mapping[str, SpectrumProfile], path: Path) -> Path:
    """CSV (freq, magnitude, branch) pour un tracé externe."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['freq', 'magnitude', 'branch'])
        for branch, profile in profiles.items():
            writer.writerows((f'{fr:.6f}', f'{m:.6f}', b) for fr, m, b in profile.rows(branch))
    return path


def dump_features(capture: Mapping[str, np.ndarray], directory: Path) -> Path:
    """Écrit chaque activation capturée en blob f32 et un index JSON."""
    directory = Path(directory)
    index = {}
    for key in sorted(capture):
        stem = directory / sanitize_filename(key)
        save_blob(stem, np.asarray(capture[key]), 'f32')
        index[key] = {'file': stem.name, 'shape': list(np.shape(capture[key]))}
    write_json(directory / 'features.json', index)
    return directory


# ---------------------------------------------------------------------------
# Terme de borne de complexité
# ---------------------------------------------------------------------------

@dataclass
class BoundInputs:
    """
    Caractéristiques x_i(j) de forme (N, *grille, dim), ensemble de
    décalages d'indices et constantes de la borne (c vaut 1 pour les
    comparaisons relatives).
    """
    features: np.ndarray
    shifts: Sequence[Tuple[int, ...]]
    B: float = 1.0
    d: float = 2.0
    c: float = 1.0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.shifts = [tuple(int(s) for s in shift) for shift in self.shifts]
        grid = self.features.shape[1:-1]
        if self.features.ndim < 3:
            raise ShapeError(f"Caractéristiques (N, *grille, dim) attendues, forme {self.features.shape}")
        if not self.shifts:
            raise ValueError("Ensemble de décalages vide")
        if self.d < 2:
            raise ValueError(f"d doit être ≥ 2 (reçu {self.d})")
        for shift in self.shifts:
            if len(shift) != len(grid) or any(abs(s) >= n for s, n in zip(shift, grid)):
                raise ValueError(f"Décalage {shift} invalide pour une grille {grid}")


def _shifted_pair(x: np.ndarray, shift: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Vues (x(j), x(j')) alignées avec j − j' = shift sur les axes de grille."""
    a_idx, b_idx = [slice(None)], [slice(None)]
    for s, n in zip(shift, x.shape[1:-1]):
        if s >= 0:
            a_idx.append(slice(s, n))
            b_idx.append(slice(0, n - s))
        else:
            a_idx.append(slice(0, n + s))
            b_idx.append(slice(-s, n))
    return x[tuple(a_idx)], x[tuple(b_idx)]


def complexity_bound_term(inputs: BoundInputs) -> float:
    """
    (c·B·√(ln d) / N) · max sur j − j' ∈ 𝒩 de √(Σᵢ ‖x_i(j) − x_i(j')‖²).
    """
    x = inputs.features
    best = 0.0
    for shift in inputs.shifts:
        a, b = _shifted_pair(x, shift)
        per_position = np.sum((a - b) ** 2, axis=(0, -1))
        if per_position.size:
            best = max(best, float(per_position.max()))
    return inputs.c * inputs.B * math.sqrt(math.log(inputs.d)) / len(x) * math.sqrt(best)


def sample_unit_sphere(rng: np.random.Generator, shape: Sequence[int], dim: int) -> np.ndarray:
    """Vecteurs uniformes sur la sphère unité (tirages gaussiens normalisés)."""
    x = rng.standard_normal((*shape, dim))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def sample_distinct_pairs(rng: np.random.Generator, count: int, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """Paires de vecteurs unitaires distants d'au moins MIN_PAIR_DISTANCE."""
    u, v = sample_unit_sphere(rng, (count,), dim), sample_unit_sphere(rng, (count,), dim)
    close = np.linalg.norm(u - v, axis=-1) < MIN_PAIR_DISTANCE
    while np.any(close):
        v[close] = sample_unit_sphere(rng, (int(close.sum()),), dim)
        close = np.linalg.norm(u - v, axis=-1) < MIN_PAIR_DISTANCE
    return u, v


# ---------------------------------------------------------------------------
# Régime de corrélation de la carte de Morlet
# ---------------------------------------------------------------------------

@dataclass
class MorletCorrelationReport:
    constant: float
    contractive: bool
    max_ratio: float
    ratio_within_constant: bool
    bound_before: List[float] = field(default_factory=list)
    bound_after: List[float] = field(default_factory=list)
    holds: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def morlet_correlation_check(params: MorletParams, trials: int = 1000, datasets: int = 20, dim: int = 8,
                             samples: int = 16, grid: Tuple[int, int] = (4, 4), seed: int = 0) -> MorletCorrelationReport:
    """
    Confronte la constante analytique de la carte de Morlet à son rapport de
    Lipschitz empirique sur des paires unitaires, puis compare le terme de
    borne avant et après la carte sur des jeux de caractéristiques aléatoires.

    `holds` n'est vrai que dans le régime contractant (constante < 1).
    """
    if trials < 100:
        raise ValueError(f"Au moins 100 essais requis (reçu {trials})")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
    bound = morlet_lipschitz_constant(params)

    u, v = sample_distinct_pairs(rng, trials, dim)
    ratios = np.abs(morlet_feature_map(u, params) - morlet_feature_map(v, params)) / np.linalg.norm(u - v, axis=-1)
    max_ratio = float(ratios.max())

    before, after = [], []
    for _ in range(datasets):
        x = sample_unit_sphere(rng, (samples, *grid), dim)
        shifts = [(0, 1), (1, 0)]
        before.append(complexity_bound_term(BoundInputs(x, shifts, d=dim)))
        after.append(complexity_bound_term(BoundInputs(morlet_feature_map(x, params)[..., None], shifts, d=dim)))

    within = max_ratio <= bound.value + 1e-12
    report = MorletCorrelationReport(
        constant=bound.value, contractive=bound.contractive, max_ratio=max_ratio, ratio_within_constant=within,
        bound_before=before, bound_after=after,
        holds=bool(bound.contractive and within and all(a <= b + 1e-12 for a, b in zip(after, before))),
    )
    if not bound.contractive:
        logger.info("Constante de Morlet %.4f ≥ 1 : aucune conclusion", bound.value)
    return report


# ---------------------------------------------------------------------------
# Caractéristiques de Fourier
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FourierFeatureParams:
    """Amplitudes a₁…a_m et vecteurs de fréquence b₁…b_m (m × dim)."""
    amplitudes: np.ndarray
    frequencies: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.amplitudes, dtype=np.float64))
        b = np.atleast_2d(np.asarray(self.frequencies, dtype=np.float64))
        if a.ndim != 1 or len(a) < 1 or b.shape[0] != len(a):
            raise ShapeError(f"{a.shape} amplitudes pour des fréquences {b.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("Paramètres de Fourier non finis")
        object.__setattr__(self, 'amplitudes', a)
        object.__setattr__(self, 'frequencies', b)

    @property
    def m(self) -> int:
        return len(self.amplitudes)

    @classmethod
    def random(cls, rng: np.random.Generator, m: int, dim: int, scale: float = 1.0) -> 'FourierFeatureParams':
        return cls(rng.standard_normal(m), scale * rng.standard_normal((m, dim)))


def fourier_features(x: np.ndarray, params: FourierFeatureParams) -> np.ndarray:
    """γ(x) = [a_k cos(2π b_kᵀx), a_k sin(2π b_kᵀx)]_k sur le dernier axe."""
    phase = 2 * math.pi * np.asarray(x, dtype=np.float64) @ params.frequencies.T
    a = params.amplitudes
    return np.stack([a * np.cos(phase), a * np.sin(phase)], axis=-1).reshape(*phase.shape[:-1], 2 * params.m)


def fourier_distance_sq(x: np.ndarray, y: np.ndarray, params: FourierFeatureParams,
                        identity: bool = True) -> np.ndarray:
    """
    ‖γ(x) − γ(y)‖², directement ou par l'identité
    γ(x)ᵀγ(y) = Σ a_k² cos(2π b_kᵀ(x − y)).
    """
    if not identity:
        return np.sum((fourier_features(x, params) - fourier_features(y, params)) ** 2, axis=-1)
    phase = 2 * math.pi * (np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) @ params.frequencies.T
    return np.sum(2 * params.amplitudes ** 2 * (1.0 - np.cos(phase)), axis=-1)


@dataclass
class FourierCheckReport:
    gamma_sum: float
    gamma_sum_direct: float
    bound: float
    raw_sum: float
    holds: bool
    amplitude_condition: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _check_unit(x: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(x, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOLERANCE):
        raise ValueError(f"Caractéristiques {name} non normalisées (‖x‖ ∈ [{norms.min():.4f}, {norms.max():.4f}])")


def fourier_feature_check(params: FourierFeatureParams, u: np.ndarray, v: np.ndarray) -> FourierCheckReport:
    """
    Vérifie Σᵢ ‖γ(x_i(j)) − γ(x_i(j'))‖² ≤ 4N Σ a_k² sur N paires unitaires
    (u[i] = x_i(j), v[i] = x_i(j')) et indique si 4N Σ a_k² est inférieur à
    Σᵢ ‖x_i(j) − x_i(j')‖² (amplitudes qui augmentent la corrélation).
    """
    u, v = np.atleast_2d(np.asarray(u, dtype=np.float64)), np.atleast_2d(np.asarray(v, dtype=np.float64))
    if u.shape != v.shape:
        raise ShapeError(f"Paires de formes {u.shape} et {v.shape}")
    _check_unit(u, 'u')
    _check_unit(v, 'v')
    n = len(u)
    gamma_sum = float(np.sum(fourier_distance_sq(u, v, params)))
    bound = 4.0 * n * float(np.sum(params.amplitudes ** 2))
    raw = float(np.sum((u - v) ** 2))
    return FourierCheckReport(
        gamma_sum=gamma_sum,
        gamma_sum_direct=float(np.sum(fourier_distance_sq(u, v, params, identity=False))),
        bound=bound, raw_sum=raw,
        holds=gamma_sum <= bound * (1 + 1e-12) + 1e-12,
        amplitude_condition=bound < raw,
    )


# ---------------------------------------------------------------------------
# Corrélation des caractéristiques voisines
# ---------------------------------------------------------------------------

def _covariance(a: np.ndarray, b: np.ndarray, pearson: bool) -> np.ndarray:
    """Covariance (ou corrélation) empirique le long de l'axe 0, composante par composante."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    cov = np.sum(a * b, axis=0) / (len(a) - 1)
    if not pearson:
        return cov
    scale = np.sqrt(np.sum(a * a, axis=0) * np.sum(b * b, axis=0)) / (len(a) - 1)
    return np.divide(cov, scale, out=np.zeros_like(cov), where=scale > 0)


def feature_correlation(features: np.ndarray, j: Sequence[int], j_prime: Sequence[int],
                        pearson: bool = False) -> float:
    """
    Covariance empirique entre x_i(j) et x_i(j') sur les échantillons i,
    moyennée sur les composantes. Des caractéristiques constantes donnent 0.

    Args:
        features: Tableau (N, *grille, dim)
        j, j_prime: Indices de grille
        pearson: Corrélation normalisée plutôt que covariance
    """
    x = np.asarray(features, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("Au moins deux échantillons requis")
    a = x[(slice(None), *j)]
    b = x[(slice(None), *j_prime)]
    return float(np.mean(_covariance(a, b, pearson)))


def neighbour_correlation(features: np.ndarray, shift: Sequence[int], pearson: bool = True) -> float:
    """`feature_correlation` moyennée sur toutes les positions j − j' = shift."""
    x = np.asarray(features, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("Au moins deux échantillons requis")
    a, b = _shifted_pair(x, shift)
    return float(np.mean(_covariance(a.reshape(len(x), -1), b.reshape(len(x), -1), pearson)))


def scattering_feature_grid(images: Sequence[np.ndarray], bank: FilterBank, max_order: int = 1) -> np.ndarray:
    """Coefficients de diffusion empilés en (N, h, w, canaux)."""
    stacks = []
    for image in images:
        coeffs = scattering_transform(image, bank, max_order)
        maps = [coeffs.order0] + list(coeffs.order1.values()) + list(coeffs.order2.values())
        stacks.append(np.stack(maps, axis=-1))
    return np.stack(stacks)


def scattering_correlation_gain(images: Sequence[np.ndarray], bank: FilterBank,
                                max_order: int = 1) -> Tuple[float, float]:
    """
    Corrélation entre voisins des pixels bruts et des coefficients de
    diffusion, au même déplacement spatial de 2^J pixels.

    Returns:
        (corrélation brute, corrélation après diffusion)
    """
    raw = np.stack([np.asarray(img, dtype=np.float64) for img in images])[..., None]
    step = 2 ** bank.J
    raw_corr = neighbour_correlation(raw, (step, 0))
    scat_corr = neighbour_correlation(scattering_feature_grid(images, bank, max_order), (1, 0))
    return raw_corr, scat_corr
