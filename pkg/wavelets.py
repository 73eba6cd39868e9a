"""Module des ondelettes : CWT 1-D (Morlet, Paul, DoG) et banc de filtres de Morlet 2-D directionnels."""

import functools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import special

from file_operations import load_blob, read_json, save_blob, write_json
from numerics import NumericalError, ShapeError, is_power_of_two

logger = logging.getLogger(__name__)

MIN_SIGNAL_LENGTH = 16
CWT_FREQ_MIN = 0.5
CWT_FREQ_MAX = 70.0
CWT_NUM_SCALES = 32


class MorletParams(BaseModel):
    """Paramètres d'une ondelette de Morlet C1·(e^{iξu} − C2)·e^{−|u|²/(2σ²)}."""
    model_config = ConfigDict(frozen=True)

    C1: float = Field(1.0, gt=0)
    C2: float = 0.0
    xi: float = 3 * math.pi / 4
    sigma: float = Field(0.8, gt=0)

    @classmethod
    def admissible(cls, C1: float = 1.0, xi: float = 3 * math.pi / 4, sigma: float = 0.8) -> 'MorletParams':
        """Paramètres à moyenne nulle : C2 = exp(−ξ²σ²/2)."""
        return cls(C1=C1, C2=math.exp(-(xi * sigma) ** 2 / 2), xi=xi, sigma=sigma)


# ---------------------------------------------------------------------------
# Constante de Lipschitz de Morlet
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LipschitzBound:
    value: float
    contractive: bool


def morlet_lipschitz_constant(params: MorletParams) -> LipschitzBound:
    """
    Borne |C1|·(|ξ| + (|C2|+1)·2/σ²) sur la constante de Lipschitz de la
    carte de Morlet restreinte aux caractéristiques normalisées.
    """
    value = abs(params.C1) * (abs(params.xi) + (abs(params.C2) + 1.0) * 2.0 / params.sigma ** 2)
    return LipschitzBound(value=value, contractive=value < 1.0)


def morlet_feature_map(x: np.ndarray, params: MorletParams) -> np.ndarray:
    """
    Applique |C1·(e^{i⟨x,ξ⟩} − C2)·e^{−‖x‖²/(2σ²)}| au dernier axe de x.

    Le vecteur ξ est de norme |xi|, porté par la diagonale (1, …, 1)/√d.

    Args:
        x: Caractéristiques (..., d)

    Returns:
        Tableau réel (...)
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    phase = x.sum(axis=-1) * params.xi / math.sqrt(d)
    envelope = np.exp(-(x * x).sum(axis=-1) / (2 * params.sigma ** 2))
    return np.abs(params.C1 * (np.exp(1j * phase) - params.C2) * envelope)


# ---------------------------------------------------------------------------
# CWT 1-D (conventions de Torrence et Compo)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MotherWavelet:
    """Ondelette mère analytique évaluée dans le domaine de Fourier."""
    name: str
    order: float
    fourier_factor: float
    efold: float
    spectrum: Callable[[np.ndarray], np.ndarray] = field(repr=False)


def _morlet_spectrum(omega0: float) -> Callable[[np.ndarray], np.ndarray]:
    def fn(s_omega):
        return np.pi ** -0.25 * (s_omega > 0) * np.exp(-0.5 * (s_omega - omega0) ** 2)
    return fn


def _paul_spectrum(m: int) -> Callable[[np.ndarray], np.ndarray]:
    norm = 2 ** m / math.sqrt(m * math.factorial(2 * m - 1))

    def fn(s_omega):
        positive = s_omega > 0
        so = np.where(positive, s_omega, 0.0)
        return norm * positive * so ** m * np.exp(-so)
    return fn


def _dog_spectrum(m: int) -> Callable[[np.ndarray], np.ndarray]:
    norm = -(1j ** m) / math.sqrt(special.gamma(m + 0.5))

    def fn(s_omega):
        return norm * s_omega ** m * np.exp(-0.5 * s_omega ** 2)
    return fn


def _build_mothers(omega0: float = 6.0, paul_order: int = 4, dog_order: int = 2) -> Dict[str, MotherWavelet]:
    return {
        'morlet': MotherWavelet('morlet', omega0, 4 * np.pi / (omega0 + math.sqrt(2 + omega0 ** 2)),
                                math.sqrt(2), _morlet_spectrum(omega0)),
        'paul': MotherWavelet('paul', paul_order, 4 * np.pi / (2 * paul_order + 1),
                              1 / math.sqrt(2), _paul_spectrum(paul_order)),
        'dog': MotherWavelet('dog', dog_order, 2 * np.pi / math.sqrt(dog_order + 0.5),
                             math.sqrt(2), _dog_spectrum(dog_order)),
    }


MOTHERS = _build_mothers()
CWT_WAVELETS = ('dog', 'paul', 'morlet')


def get_mother(name: str) -> MotherWavelet:
    if name not in MOTHERS:
        raise ValueError(f"Ondelette inconnue : {name} (disponibles : {', '.join(MOTHERS)})")
    return MOTHERS[name]


def frequency_grid(f_min: float = CWT_FREQ_MIN, f_max: float = CWT_FREQ_MAX,
                   num: int = CWT_NUM_SCALES) -> np.ndarray:
    """Fréquences logarithmiques, de la plus haute à la plus basse (ligne 0 = f_max)."""
    return np.geomspace(f_max, f_min, num)


def scales_for(name: str, frequencies: np.ndarray) -> np.ndarray:
    """Échelles (secondes) dont la période de Fourier correspond aux fréquences demandées."""
    return 1.0 / (np.asarray(frequencies, dtype=float) * get_mother(name).fourier_factor)


@dataclass
class CwtResult:
    """Coefficients de la CWT et métadonnées par ligne."""
    coefficients: np.ndarray
    scales: np.ndarray
    periods: np.ndarray
    valid: np.ndarray
    coi: np.ndarray


def cwt_1d(signal: np.ndarray, wavelet: str, scales: Sequence[float], dt: float = 1 / 250) -> CwtResult:
    """
    Transformée en ondelettes continue par FFT, échelle par échelle.

    W(s, n) = Σ_k x̂_k · conj(ψ̂(s·ω_k)) · e^{iω_k n dt}, avec ψ̂ normalisée
    par √(2πs/dt). La convolution est circulaire : un décalage entier du
    signal décale exactement les coefficients.

    Args:
        signal: Séquence réelle de longueur ≥ 16
        wavelet: 'morlet', 'paul' ou 'dog'
        scales: Échelles strictement positives (secondes)
        dt: Pas d'échantillonnage (secondes)

    Returns:
        CwtResult ; une ligne dont l'échelle dépasse la durée du signal est marquée invalide
    """
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1 or x.size < MIN_SIGNAL_LENGTH:
        raise ValueError(f"Signal 1-D d'au moins {MIN_SIGNAL_LENGTH} échantillons requis, forme {x.shape}")
    scales = np.asarray(scales, dtype=float)
    if np.any(scales <= 0):
        raise ValueError("Les échelles doivent être strictement positives")
    mother = get_mother(wavelet)

    n = x.size
    omega = 2 * np.pi * np.fft.fftfreq(n, d=dt)
    x_hat = np.fft.fft(x)
    psi_hat = np.sqrt(2 * np.pi * scales[:, None] / dt) * mother.spectrum(scales[:, None] * omega[None, :])
    coefficients = np.fft.ifft(x_hat[None, :] * np.conj(psi_hat), axis=1)

    duration = n * dt
    valid = scales <= duration
    if not valid.all():
        logger.debug("%d échelle(s) hors du cône d'influence pour %s", int((~valid).sum()), wavelet)
    edge = np.minimum(np.arange(n), n - 1 - np.arange(n)) * dt
    coi = mother.fourier_factor * edge / mother.efold
    return CwtResult(coefficients, scales, scales * mother.fourier_factor, valid, coi)


# ---------------------------------------------------------------------------
# Banc de filtres 2-D
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterBank:
    """
    Banc de Morlet 2-D dans le domaine de Fourier : J·L passe-bandes et un passe-bas.

    Les tableaux sont en lecture seule ; un banc peut être partagé entre threads.
    """
    J: int
    L: int
    size: Tuple[int, int]
    params: MorletParams
    slant: float
    psi_hat: Dict[Tuple[int, int], np.ndarray]
    phi_hat: np.ndarray
    lp_min: float
    lp_max: float

    def filters(self) -> Iterator[Tuple[int, int, np.ndarray]]:
        """Itère (j, θ, ψ̂) dans l'ordre fixe j croissant puis θ croissant."""
        for j in range(1, self.J + 1):
            for theta in range(self.L):
                yield j, theta, self.psi_hat[(j, theta)]

    def littlewood_paley(self) -> np.ndarray:
        return _littlewood_paley(self.psi_hat.values(), self.phi_hat)


def _frequency_mesh(h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    wy = 2 * np.pi * np.fft.fftfreq(h)
    wx = 2 * np.pi * np.fft.fftfreq(w)
    return np.meshgrid(wy, wx, indexing='ij')


def _reflect(a: np.ndarray) -> np.ndarray:
    """a(−ω) sur la grille de la TFD."""
    return np.roll(np.flip(a, axis=(0, 1)), 1, axis=(0, 1))


def _symmetric_energy(filters) -> np.ndarray:
    total = None
    for f in filters:
        e = np.abs(f) ** 2
        e = 0.5 * (e + _reflect(e))
        total = e if total is None else total + e
    return total


def _littlewood_paley(filters, phi_hat: np.ndarray) -> np.ndarray:
    return np.abs(phi_hat) ** 2 + _symmetric_energy(filters)


def _gaussian(wy, wx, cy, cx, precision) -> np.ndarray:
    dy, dx = wy - cy, wx - cx
    q = precision[0, 0] * dy * dy + 2 * precision[0, 1] * dy * dx + precision[1, 1] * dx * dx
    return np.exp(-0.5 * q)


def _morlet_hat(wy, wx, j: int, theta: float, params: MorletParams, slant: float) -> np.ndarray:
    dilation = 2.0 ** (j - 1)
    sigma = params.sigma * dilation
    xi = params.xi / dilation
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    precision = sigma ** 2 * rot @ np.diag([1.0, 1.0 / slant ** 2]) @ rot.T
    gabor = _gaussian(wy, wx, xi * math.cos(theta), xi * math.sin(theta), precision)
    envelope = _gaussian(wy, wx, 0.0, 0.0, precision)
    # Correction de moyenne nulle
    correction = gabor[0, 0] / envelope[0, 0]
    return gabor - correction * envelope


def _lowpass_hat(wy, wx, J: int, params: MorletParams) -> np.ndarray:
    radius2 = wy * wy + wx * wx
    sigma = params.sigma * 2.0 ** J
    phi = np.exp(-0.5 * radius2 * sigma ** 2)
    # Support limité au disque |ω| < π/2^J : le sous-échantillonnage par 2^J est exact
    phi[radius2 >= (np.pi / 2.0 ** J) ** 2] = 0.0
    return phi


LP_FLOOR = 0.5


def _pointwise_gain(q: np.ndarray, target: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Gain g(ω) = √(cible/Q) sur le support, nul ailleurs."""
    usable = support & (q > 1e-12 * q.max())
    gain = np.zeros_like(q)
    gain[usable] = np.sqrt(target[usable] / q[usable])
    return gain


@functools.lru_cache(maxsize=32)
def _cached_bank(J: int, L: int, size: Tuple[int, int], params: MorletParams, slant: float) -> FilterBank:
    h, w = size
    wy, wx = _frequency_mesh(h, w)
    radius = np.sqrt(wy * wy + wx * wx)
    # Disque de Nyquist privé de l'origine : seul domaine où la somme est contrôlée
    inside = (radius > 0) & (radius <= np.pi)
    phi = _lowpass_hat(wy, wx, J, params)
    target = 1.0 - phi ** 2

    raw = {(j, l): _morlet_hat(wy, wx, j, l * np.pi / L, params, slant)
           for j in range(1, J + 1) for l in range(L)}

    gain = _pointwise_gain(_symmetric_energy(raw.values()), target, inside)
    shaped = {key: gain * f for key, f in raw.items()}

    # Normes égales à j fixé, quel que soit θ
    for j in range(1, J + 1):
        norms = np.array([np.linalg.norm(shaped[(j, l)]) for l in range(L)])
        for l in range(L):
            shaped[(j, l)] = shaped[(j, l)] * (norms.mean() / norms[l])

    # Échelle globale : somme de Littlewood–Paley ≤ 1 partout
    q = _symmetric_energy(shaped.values())
    mask = q > 0
    scale2 = float(np.min(target[mask] / q[mask]))
    psi_hat = {}
    for key, f in shaped.items():
        arr = (math.sqrt(scale2) * f).astype(complex)
        arr.setflags(write=False)
        psi_hat[key] = arr
    phi = phi.astype(complex)
    phi.setflags(write=False)

    lp = _littlewood_paley(psi_hat.values(), phi)
    bank = FilterBank(J=J, L=L, size=(h, w), params=params, slant=slant, psi_hat=psi_hat, phi_hat=phi,
                      lp_min=float(lp[inside].min()), lp_max=float(lp.max()))
    logger.debug("Banc J=%d L=%d %dx%d : Littlewood-Paley dans [%.3f, %.3f]", J, L, h, w, bank.lp_min, bank.lp_max)
    if bank.lp_min < LP_FLOOR:
        # Une seule orientation s'annule sur toute une droite : la borne basse est hors d'atteinte
        if L == 1:
            logger.warning("Banc J=%d L=1 : Littlewood-Paley minimal %.3f < %.1f", J, bank.lp_min, LP_FLOOR)
        else:
            raise NumericalError(
                f"Banc J={J} L={L} {h}x{w} : Littlewood-Paley minimal {bank.lp_min:.3f} < {LP_FLOOR}")
    return bank


def _as_size(size: Union[int, Tuple[int, int]]) -> Tuple[int, int]:
    if isinstance(size, int):
        return size, size
    h, w = size
    return int(h), int(w)


def build_filter_bank(J: int, L: int, size: Union[int, Tuple[int, int]],
                      params: Optional[MorletParams] = None, slant: Optional[float] = None) -> FilterBank:
    """
    Construit (ou récupère en cache) le banc de filtres de diffusion.

    ψ_{j,θ} est la Morlet mère dilatée par 2^{j−1} et tournée de θ = lπ/L ;
    le passe-bas est une gaussienne à l'échelle 2^J tronquée au disque
    |ω| < π/2^J. Un gain point par point ramène la somme de Littlewood–Paley
    à 1 sur le disque de Nyquist |ω| ≤ π (les coins de la grille carrée sont
    hors support), puis l'égalisation des normes à j fixé et une mise à
    l'échelle globale garantissent 0.5 ≤ |φ̂|² + ½Σ(|ψ̂(ω)|² + |ψ̂(−ω)|²) ≤ 1
    sur ce disque, origine exclue.

    Args:
        J: Nombre d'échelles dyadiques (≥ 1)
        L: Nombre d'orientations (≥ 1)
        size: Taille de grille (puissances de deux), entier ou (H, W)
        params: Paramètres de Morlet (σ=0.8, ξ=3π/4 par défaut)
        slant: Aplatissement de l'enveloppe (4/L par défaut)

    Raises:
        ValueError: J ou L invalides, ou J trop grand pour la taille
        ShapeError: taille non puissance de deux
        NumericalError: somme de Littlewood–Paley sous 0.5 sur le disque (L ≥ 2)
    """
    if J < 1 or L < 1:
        raise ValueError(f"J et L doivent être ≥ 1 (J={J}, L={L})")
    h, w = _as_size(size)
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise ShapeError(f"Taille de banc {h}×{w} : puissances de deux requises")
    if 2 ** (J + 1) > min(h, w):
        raise ValueError(f"J={J} trop grand pour une grille {h}×{w} (2^(J+1) > {min(h, w)})")
    params = params or MorletParams()
    slant = float(slant if slant is not None else 4.0 / L)
    return _cached_bank(J, L, (h, w), params, slant)


def save_filter_bank(bank: FilterBank, directory: Path) -> Path:
    """Sauvegarde le banc : un blob (2, H, W) [re, im] par filtre + manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    filters = []
    for j, theta, f in bank.filters():
        name = f"psi_j{j}_t{theta}"
        save_blob(directory / name, np.stack([f.real, f.imag]), dtype='f64')
        filters.append({'j': j, 'theta': theta, 'file': name})
    save_blob(directory / 'phi', np.stack([bank.phi_hat.real, bank.phi_hat.imag]), dtype='f64')
    manifest = {
        'J': bank.J, 'L': bank.L, 'size': list(bank.size), 'slant': bank.slant,
        'params': bank.params.model_dump(), 'lp_min': bank.lp_min, 'lp_max': bank.lp_max,
        'filters': filters, 'phi': 'phi',
    }
    path = directory / 'manifest.json'
    write_json(path, manifest)
    return path


def load_filter_bank(directory: Path) -> FilterBank:
    """Recharge un banc sauvegardé par `save_filter_bank`."""
    directory = Path(directory)
    manifest = read_json(directory / 'manifest.json')

    def _complex(name):
        pair = load_blob(directory / name)
        arr = pair[0] + 1j * pair[1]
        arr.setflags(write=False)
        return arr

    psi_hat = {(e['j'], e['theta']): _complex(e['file']) for e in manifest['filters']}
    return FilterBank(J=manifest['J'], L=manifest['L'], size=tuple(manifest['size']),
                      params=MorletParams(**manifest['params']), slant=manifest['slant'],
                      psi_hat=psi_hat, phi_hat=_complex(manifest['phi']),
                      lp_min=manifest['lp_min'], lp_max=manifest['lp_max'])
