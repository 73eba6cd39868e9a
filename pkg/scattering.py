"""Module de diffusion invariante : chemins, propagateur, coefficients fenêtrés et plongement de jetons."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import numerics
from numerics import ShapeError, Tensor
from wavelets import FilterBank, build_filter_bank

logger = logging.getLogger(__name__)

ScatterPath = Tuple[Tuple[int, int], ...]


def path_count(order: int, J: int, L: int) -> int:
    """Nombre de chemins d'ordre exactement `order` (j1 < j2 à l'ordre 2)."""
    if order == 0:
        return 1
    if order == 1:
        return J * L
    if order == 2:
        return L * L * J * (J - 1) // 2
    raise ValueError(f"Ordre de diffusion non supporté : {order}")


def output_channels(in_channels: int, order: int, J: int, L: int, projection: Optional[int] = None) -> int:
    """Canaux en sortie de scattering_embed (avant ou après projection)."""
    if projection is not None:
        return projection
    return in_channels * sum(path_count(m, J, L) for m in range(order + 1))


def enumerate_paths(J: int, L: int, max_order: int) -> List[ScatterPath]:
    """Chemins admissibles dans l'ordre fixe : ordre 0, puis 1, puis 2."""
    paths: List[ScatterPath] = [()]
    if max_order >= 1:
        paths += [((j, t),) for j in range(1, J + 1) for t in range(L)]
    if max_order >= 2:
        paths += [((j1, t1), (j2, t2))
                  for j1 in range(1, J + 1) for t1 in range(L)
                  for j2 in range(j1 + 1, J + 1) for t2 in range(L)]
    return paths


def _windowed(u: Tensor, bank: FilterBank, out_hw: Tuple[int, int]) -> Tensor:
    """φ_{2^J} * u, sous-échantillonné par 2^J puis recadré."""
    s = numerics.lowpass_subsample(u, bank.phi_hat, 2 ** bank.J)
    if s.shape[-2:] != out_hw:
        s = numerics.take(s, (Ellipsis, slice(0, out_hw[0]), slice(0, out_hw[1])))
    return s


def _psi_stack(bank: FilterBank, j_from: int) -> Tuple[List[Tuple[int, int]], np.ndarray]:
    """Clés (j, θ) et ψ̂ empilés (K, H, W) pour j ≥ j_from, dans l'ordre de bank.filters()."""
    keys, filters = [], []
    for j, t, psi in bank.filters():
        if j >= j_from:
            keys.append((j, t))
            filters.append(psi)
    return keys, np.stack(filters)


def _propagate(x: Tensor, bank: FilterBank, max_order: int,
               out_hw: Tuple[int, int]) -> List[Tuple[List[ScatterPath], Tensor]]:
    """
    Cascade ondelettes + module, par blocs de chemins.

    Chaque bloc associe ses chemins à un tenseur (..., P, h, w) ; la suite
    des blocs reproduit l'ordre de `enumerate_paths`. x est déjà à la taille
    du banc et les cartes intermédiaires U restent à pleine résolution.
    """
    lead = x.shape[:-2]
    axis = len(lead)
    blocks = [([()], numerics.reshape(_windowed(x, bank, out_hw), lead + (1,) + out_hw))]
    if max_order == 0:
        return blocks
    keys, psi = _psi_stack(bank, 1)
    u1 = numerics.modulus(numerics.conv2d_fft(x, psi))
    blocks.append(([(k,) for k in keys], _windowed(u1, bank, out_hw)))
    if max_order < 2:
        return blocks
    L = bank.L
    for j1 in range(1, bank.J):
        later, psi2 = _psi_stack(bank, j1 + 1)
        u1_j = numerics.slice_axis(u1, (j1 - 1) * L, j1 * L, axis)
        u2 = numerics.modulus(numerics.conv2d_fft(u1_j, psi2))
        u2 = numerics.reshape(u2, lead + (L * len(later),) + u2.shape[-2:])
        paths = [((j1, t1), k2) for t1 in range(L) for k2 in later]
        blocks.append((paths, _windowed(u2, bank, out_hw)))
    return blocks


@dataclass
class ScatteringCoeffs:
    """
    Coefficients S_J[p]x rangés par ordre.

    Les énergies sont des normes L² sur la grille d'entrée : un pixel
    sous-échantillonné pèse 4^J pixels d'entrée.
    """
    order0: np.ndarray
    order1: Dict[ScatterPath, np.ndarray] = field(default_factory=dict)
    order2: Dict[ScatterPath, np.ndarray] = field(default_factory=dict)
    subsample_log2: int = 0
    energy_by_order: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def area_weight(self) -> float:
        return 4.0 ** self.subsample_log2

    def flatten(self) -> np.ndarray:
        """Concaténation de tous les coefficients (ordre 0, 1 puis 2)."""
        maps = [self.order0] + list(self.order1.values()) + list(self.order2.values())
        return np.concatenate([m.ravel() for m in maps])


def scattering_transform(x: np.ndarray, bank: FilterBank, max_order: int = 2) -> ScatteringCoeffs:
    """
    Transformée de diffusion d'une image H×W (domaine circulaire).

    Args:
        x: Image réelle aux dimensions du banc
        bank: Banc de filtres
        max_order: 0, 1 ou 2

    Returns:
        ScatteringCoeffs avec énergies pondérées par 4^J
    """
    x = np.asarray(x)
    if x.shape != bank.size:
        raise ShapeError(f"Image {x.shape} incompatible avec le banc {bank.size}")
    if max_order not in (0, 1, 2):
        raise ValueError(f"max_order doit valoir 0, 1 ou 2 (reçu {max_order})")
    step = 2 ** bank.J
    out_hw = (bank.size[0] // step, bank.size[1] // step)
    with numerics.no_record():
        blocks = _propagate(Tensor(x, dtype=np.float64), bank, max_order, out_hw)

    coeffs = ScatteringCoeffs(order0=blocks[0][1].data[0], subsample_log2=bank.J)
    energies = [0.0, 0.0, 0.0]
    # Réduction dans l'ordre fixe des chemins
    for paths, s in blocks:
        for path, m in zip(paths, s.data):
            energies[len(path)] += float(np.sum(m.astype(np.float64) ** 2))
            if len(path) == 1:
                coeffs.order1[path] = m
            elif len(path) == 2:
                coeffs.order2[path] = m
    coeffs.energy_by_order = tuple(e * coeffs.area_weight for e in energies)
    return coeffs


def contraction_check(x: np.ndarray, y: np.ndarray, bank: FilterBank, max_order: int = 2) -> Tuple[float, float]:
    """
    (‖S_J x − S_J y‖, ‖x − y‖) sur les coefficients concaténés des ordres 0 à 2.
    """
    sx = scattering_transform(x, bank, max_order)
    sy = scattering_transform(y, bank, max_order)
    diff = sx.flatten().astype(np.float64) - sy.flatten().astype(np.float64)
    lhs = float(np.sqrt(sx.area_weight * np.sum(diff ** 2)))
    rhs = float(np.linalg.norm(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)))
    return lhs, rhs


def translation_sensitivity(x: np.ndarray, shift: Tuple[int, int], bank: FilterBank, max_order: int = 2) -> float:
    """
    ‖S_J(x décalé) − S_J x‖ / ‖S_J x‖, décalage circulaire.

    Raises:
        ValueError: énergie de diffusion nulle
    """
    base = scattering_transform(x, bank, max_order).flatten().astype(np.float64)
    norm = np.linalg.norm(base)
    if norm == 0:
        raise ValueError("Sensibilité à la translation indéfinie pour une image d'énergie nulle")
    moved = scattering_transform(np.roll(x, shift, axis=(0, 1)), bank, max_order).flatten().astype(np.float64)
    return float(np.linalg.norm(moved - base) / norm)


class ScatteringLayerConfig(BaseModel):
    """Couche de plongement par diffusion."""
    model_config = ConfigDict(frozen=True)

    order: Literal[1, 2] = 1
    J_layer: int = Field(1, ge=1)
    L: int = Field(4, ge=1)
    channel_mixing: Literal['none', 'projection'] = 'projection'
    out_channels: Optional[int] = Field(None, gt=0)

    @model_validator(mode='after')
    def _check_projection(self):
        if self.channel_mixing == 'projection' and self.out_channels is None:
            raise ValueError("Projection de canaux demandée sans nombre de canaux cible")
        return self

    def raw_channels(self, in_channels: int) -> int:
        return output_channels(in_channels, self.order, self.J_layer, self.L)


def embedding_bank(cfg: ScatteringLayerConfig, h: int, w: int) -> FilterBank:
    """Banc pour une entrée h×w complétée à la puissance de deux suivante."""
    return build_filter_bank(cfg.J_layer, cfg.L, (numerics.next_power_of_two(h), numerics.next_power_of_two(w)))


def scattering_embed(x: Tensor, cfg: ScatteringLayerConfig, bank: Optional[FilterBank] = None,
                     projection: Optional[Tensor] = None, bias: Optional[Tensor] = None) -> Tensor:
    """
    Plongement différentiable : coefficients d'ordre 0 à cfg.order par canal,
    sous-échantillonnés par 2^J, puis projection 1×1 optionnelle.

    Args:
        x: Tenseur (N, C, H, W), H et W divisibles par 2^J
        cfg: Configuration de la couche
        bank: Banc à la taille complétée (construit si absent)
        projection: Poids (out_channels, C·P) si cfg.channel_mixing == 'projection'
        bias: Biais optionnel de la projection

    Returns:
        Tenseur (N, C·P ou out_channels, H/2^J, W/2^J), canaux groupés par canal d'entrée
    """
    n, c, h, w = x.shape
    step = 2 ** cfg.J_layer
    if h % step or w % step:
        raise ShapeError(f"Entrée {h}×{w} non divisible par 2^{cfg.J_layer}")
    bank = bank or embedding_bank(cfg, h, w)
    ph, pw = bank.size
    if ph < h or pw < w:
        raise ShapeError(f"Banc {bank.size} plus petit que l'entrée {h}×{w}")
    padded = numerics.pad2d(x, 0, ph - h, 0, pw - w) if (ph, pw) != (h, w) else x
    out_hw = (h // step, w // step)

    stacked = numerics.concat([s for _, s in _propagate(padded, bank, cfg.order, out_hw)], axis=2)
    p = stacked.shape[2]
    raw = numerics.reshape(stacked, (n, c * p) + out_hw)

    if cfg.channel_mixing == 'none':
        return raw
    if projection is None or projection.shape != (cfg.out_channels, c * p):
        got = None if projection is None else projection.shape
        raise ShapeError(f"Projection attendue ({cfg.out_channels}, {c * p}), reçue {got}")
    return numerics.pointwise_conv(raw, projection, bias)
