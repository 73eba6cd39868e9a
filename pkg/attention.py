"""
Module d'attention : attention par covariance croisée (XCA), attention
sensible aux fréquences (FAA) à deux branches, encodage de position LePE
et unité de Fourier locale (LFU).

Les cartes de caractéristiques sont des tenseurs (N, C, H, W) ; les jetons
d'une carte sont ses H·W pixels.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Literal, MutableMapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import numerics
from numerics import BatchNormState, ShapeError, Tensor
from scattering import ScatteringLayerConfig, output_channels, scattering_embed
from wavelets import FilterBank

logger = logging.getLogger(__name__)

Capture = Optional[MutableMapping[str, np.ndarray]]


class AttentionConfig(BaseModel):
    """Hyperparamètres d'un bloc d'attention."""
    model_config = ConfigDict(frozen=True)

    dim: int = Field(..., gt=0)
    heads: int = Field(4, gt=0)
    tau_init: float = Field(1.0, gt=0)
    high_low_split: float = Field(0.5, gt=0, lt=1)
    J_layer: int = Field(1, ge=1)
    L: int = Field(4, ge=1)
    q_mode: Literal['scattering', 'lfu'] = 'scattering'
    spatial: Optional[Tuple[int, int]] = None

    @model_validator(mode='after')
    def _check_heads(self):
        if self.q_mode == 'lfu' and self.spatial is None:
            raise ValueError("LFU : résolution spatiale du bloc requise (spatial)")
        if self.dim % (2 * self.heads):
            raise ValueError(f"dim = {self.dim} non divisible par 2 × heads = {2 * self.heads}")
        if self.high_channels % self.heads or self.low_channels % self.heads:
            raise ValueError(f"Branches {self.high_channels}/{self.low_channels} non divisibles par {self.heads} têtes")
        return self

    @property
    def high_channels(self) -> int:
        return int(round(self.dim * self.high_low_split))

    @property
    def low_channels(self) -> int:
        return self.dim - self.high_channels

    def scattering_layer(self) -> ScatteringLayerConfig:
        return ScatteringLayerConfig(order=1, J_layer=self.J_layer, L=self.L, out_channels=self.high_channels)


@dataclass
class BlockWeights:
    """Paramètres d'un bloc (noms locaux) et statistiques de normalisation associées."""
    params: Dict[str, Tensor]
    bn: Dict[str, BatchNormState] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def count(self) -> int:
        return int(sum(p.size for p in self.params.values()))


FaaWeights = BlockWeights


# ---------------------------------------------------------------------------
# XCA
# ---------------------------------------------------------------------------

def _swap_last(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return numerics.transpose(a, axes)


def xca(q: Tensor, k: Tensor, v: Tensor, tau: float = 1.0, log_tau: Optional[Tensor] = None,
        capture: Capture = None, key: str = 'attn') -> Tensor:
    """
    Attention par covariance croisée sur des matrices canaux × jetons.

    Q̂ et K̂ sont normalisées en l2 le long des jetons ; la matrice
    d'attention A[i, j] = ⟨q̂_i, k̂_j⟩/τ est d × d et le softmax porte sur i,
    de sorte que chaque colonne somme à 1. Le canal de sortie j est
    Σ_i softmax(A)[i, j] · v_i.

    Args:
        q, k, v: Tenseurs (..., d, n)
        tau: Température fixe, utilisée si log_tau est absent
        log_tau: Log-température apprise, forme (têtes,) pour une entrée (N, têtes, d, n)
        capture: Dictionnaire recevant la matrice d'attention sous `key`

    Returns:
        Tenseur (..., d, n)
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"xca : formes q {q.shape}, k {k.shape}, v {v.shape}")
    qn = numerics.l2_normalize(q, axis=-1)
    kn = numerics.l2_normalize(k, axis=-1)
    logits = numerics.matmul(qn, _swap_last(kn))
    if log_tau is not None:
        heads = log_tau.shape[0]
        inv = numerics.reshape(numerics.exp(numerics.scale(log_tau, -1.0)), (heads, 1, 1))
        logits = numerics.mul(logits, numerics.broadcast_to(inv, logits.shape))
    else:
        if tau <= 0:
            raise ValueError(f"Température τ = {tau} non positive")
        logits = numerics.scale(logits, 1.0 / tau)
    weights = numerics.softmax(logits, axis=-2)
    if capture is not None:
        capture[key] = weights.data.copy()
    return numerics.matmul(_swap_last(weights), v)


def multihead_xca(q: Tensor, k: Tensor, v: Tensor, heads: int, log_tau: Tensor,
                  capture: Capture = None, key: str = 'attn') -> Tensor:
    """XCA par têtes sur des cartes (N, C, H, W), têtes découpées le long des canaux."""
    n, c, h, w = v.shape
    if c % heads:
        raise ShapeError(f"{c} canaux non divisibles par {heads} têtes")
    shape = (n, heads, c // heads, h * w)
    out = xca(numerics.reshape(q, shape), numerics.reshape(k, shape), numerics.reshape(v, shape),
              log_tau=log_tau, capture=capture, key=key)
    return numerics.reshape(out, (n, c, h, w))


# ---------------------------------------------------------------------------
# LePE et LFU
# ---------------------------------------------------------------------------

def lepe(x: Tensor, kernel: Tensor, residual: Optional[Tensor] = None) -> Tensor:
    """
    Encodage de position local : convolution en profondeur 3×3 de x,
    ajoutée à `residual` (sortie d'attention fusionnée) s'il est fourni.
    """
    position = numerics.depthwise_conv2d(x, kernel)
    return position if residual is None else numerics.add(residual, position)


def local_fourier_unit(x: Tensor, w_re: Tensor, w_im: Tensor,
                       gain_re: Optional[Tensor] = None, gain_im: Optional[Tensor] = None) -> Tensor:
    """
    LFU : FFT2 par canal, gain spectral par canal et par fréquence, mélange
    complexe des canaux, FFT2 inverse, partie réelle.

    Sans gain fourni, le gain vaut 1 partout et la LFU se réduit au
    mélange ponctuel par w_re.

    Raises:
        ShapeError: dimensions spatiales impaires
    """
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"LFU : dimensions spatiales impaires {h}×{w}")
    if gain_re is None:
        gain_re = Tensor(np.ones(x.shape[1:], dtype=x.dtype))
    if gain_im is None:
        gain_im = Tensor(np.zeros(x.shape[1:], dtype=x.dtype))
    return numerics.local_fourier_unit(x, w_re, w_im, gain_re, gain_im)


# ---------------------------------------------------------------------------
# FAA
# ---------------------------------------------------------------------------

def init_faa(cfg: AttentionConfig, rng: np.random.Generator, std: float = 0.02) -> FaaWeights:
    """Poids FAA : normale tronquée pour les projections, zéros pour les décalages."""
    ch, cl, c = cfg.high_channels, cfg.low_channels, cfg.dim
    tn = numerics.trunc_normal
    log_tau = math.log(cfg.tau_init)
    params: Dict[str, Tensor] = {}
    if cfg.q_mode == 'scattering':
        raw = output_channels(ch, 1, cfg.J_layer, cfg.L)
        params['q_proj'] = tn(rng, (ch, raw), std)
    else:
        h, w = cfg.spatial
        params['q_lfu_re'] = tn(rng, (ch, ch), std)
        params['q_lfu_im'] = tn(rng, (ch, ch), std)
        # Gain spectral proche de 1 : la LFU part d'un mélange presque ponctuel
        params['q_lfu_gain_re'] = tn(rng, (ch, h, w), std)
        params['q_lfu_gain_re'].data += 1.0
        params['q_lfu_gain_im'] = tn(rng, (ch, h, w), std)
    for name in ('q_bn', 'k_bn', 'v_bn'):
        params[f'{name}.gamma'] = numerics.ones((ch,))
        params[f'{name}.beta'] = numerics.zeros((ch,))
    params['k_conv'] = tn(rng, (ch, ch, 3, 3), std)
    params['v_conv'] = tn(rng, (ch, ch, 3, 3), std)
    params['high.log_tau'] = Tensor(np.full(cfg.heads, log_tau), requires_grad=True)
    params['low.qkv_pw'] = tn(rng, (3 * cl, cl), std)
    params['low.qkv_dw'] = tn(rng, (3 * cl, 3, 3), std)
    params['low.log_tau'] = Tensor(np.full(cfg.heads, log_tau), requires_grad=True)
    params['fuse.weight'] = tn(rng, (c, c), std)
    params['fuse.bias'] = numerics.zeros((c,))
    params['lepe'] = tn(rng, (c, 3, 3), std)
    bn = {name: BatchNormState.fresh(ch) for name in ('q_bn', 'k_bn', 'v_bn')}
    return FaaWeights(params, bn)


def _norm(x: Tensor, weights: FaaWeights, name: str, train: bool) -> Tensor:
    return numerics.batch_norm(x, weights[f'{name}.gamma'], weights[f'{name}.beta'], weights.bn[name], train)


def embed_3x3(x: Tensor, pw: Tensor, dw: Tensor) -> Tensor:
    """Plongement de jetons : projection 1×1 puis convolution en profondeur 3×3."""
    return numerics.depthwise_conv2d(numerics.pointwise_conv(x, pw), dw)


def high_branch(xh: Tensor, weights: FaaWeights, cfg: AttentionConfig, train: bool,
                bank: Optional[FilterBank] = None, capture: Capture = None) -> Tensor:
    """
    Branche haute fréquence à résolution H/2 × W/2.

    Q vient de la couche de diffusion invariante (ou de la LFU), K et V de
    convolutions 3×3 de pas 2 ; chacun est normalisé par lot.
    """
    if cfg.q_mode == 'scattering':
        q = scattering_embed(xh, cfg.scattering_layer(), bank, projection=weights['q_proj'])
        if cfg.J_layer > 1:
            q = numerics.bilinear_resize(q, xh.shape[2] // 2, xh.shape[3] // 2)
    else:
        q = numerics.avg_pool2x(local_fourier_unit(xh, weights['q_lfu_re'], weights['q_lfu_im'],
                                                     weights['q_lfu_gain_re'], weights['q_lfu_gain_im']))
    q = _norm(q, weights, 'q_bn', train)
    k = _norm(numerics.strided_conv2d(xh, weights['k_conv'], (2, 2)), weights, 'k_bn', train)
    v = _norm(numerics.strided_conv2d(xh, weights['v_conv'], (2, 2)), weights, 'v_bn', train)
    out = multihead_xca(q, k, v, cfg.heads, weights['high.log_tau'], capture, 'high_attn')
    if capture is not None:
        capture['high_branch'] = out.data.copy()
    return out


def low_branch(xl: Tensor, weights: FaaWeights, cfg: AttentionConfig, capture: Capture = None) -> Tensor:
    """Branche basse fréquence : plongement 3×3 puis XCA à pleine résolution."""
    cl = xl.shape[1]
    qkv = embed_3x3(xl, weights['low.qkv_pw'], weights['low.qkv_dw'])
    q, k, v = (numerics.slice_axis(qkv, i * cl, (i + 1) * cl, 1) for i in range(3))
    out = multihead_xca(q, k, v, cfg.heads, weights['low.log_tau'], capture, 'low_attn')
    if capture is not None:
        capture['low_branch'] = out.data.copy()
    return out


def faa(x: Tensor, weights: FaaWeights, cfg: AttentionConfig, train: bool = False,
        bank: Optional[FilterBank] = None, capture: Capture = None) -> Tensor:
    """
    Attention sensible aux fréquences.

    x est coupé le long des canaux en X_h (branche haute) et X_l (branche
    basse) ; la sortie est Linear(Concat(X_l', Upsample(X_h'))) + DWConv(x).

    Args:
        x: Tenseur (N, C, H, W), C = cfg.dim, H et W pairs
        weights: Poids issus de `init_faa`
        cfg: Configuration du bloc
        train: Statistiques de lot (True) ou courantes (False)
        bank: Banc de la couche de diffusion (construit si absent)
        capture: Dictionnaire recevant les cartes intermédiaires

    Returns:
        Tenseur de même forme que x
    """
    n, c, h, w = x.shape
    if c != cfg.dim:
        raise ShapeError(f"FAA : {c} canaux pour dim = {cfg.dim}")
    if h % 2 or w % 2:
        raise ShapeError(f"FAA : dimensions spatiales impaires {h}×{w} (compléter en amont)")
    ch = cfg.high_channels
    high = high_branch(numerics.slice_axis(x, 0, ch, 1), weights, cfg, train, bank, capture)
    low = low_branch(numerics.slice_axis(x, ch, c, 1), weights, cfg, capture)
    high_up = numerics.bilinear_upsample(high)
    merged = numerics.concat([low, high_up], axis=1)
    fused = numerics.pointwise_conv(merged, weights['fuse.weight'], weights['fuse.bias'])
    out = lepe(x, weights['lepe'], residual=fused)
    if capture is not None:
        capture['high_branch_up'] = high_up.data.copy()
        capture['fused'] = out.data.copy()
    return out


# ---------------------------------------------------------------------------
# XCA simple (variante sans branche haute)
# ---------------------------------------------------------------------------

def init_xca_block(dim: int, heads: int, rng: np.random.Generator, std: float = 0.02,
                   tau_init: float = 1.0) -> BlockWeights:
    """Poids d'une attention XCA simple : projection qkv, sortie, LePE."""
    tn = numerics.trunc_normal
    return BlockWeights({
        'qkv.weight': tn(rng, (3 * dim, dim), std),
        'log_tau': Tensor(np.full(heads, math.log(tau_init)), requires_grad=True),
        'proj.weight': tn(rng, (dim, dim), std),
        'proj.bias': numerics.zeros((dim,)),
        'lepe': tn(rng, (dim, 3, 3), std),
    })


def xca_block(x: Tensor, weights: BlockWeights, heads: int, capture: Capture = None) -> Tensor:
    """Mélangeur de jetons XCA à pleine résolution sur (N, C, H, W)."""
    c = x.shape[1]
    qkv = numerics.pointwise_conv(x, weights['qkv.weight'])
    q, k, v = (numerics.slice_axis(qkv, i * c, (i + 1) * c, 1) for i in range(3))
    attended = multihead_xca(q, k, v, heads, weights['log_tau'], capture, 'attn')
    out = numerics.pointwise_conv(attended, weights['proj.weight'], weights['proj.bias'])
    return lepe(x, weights['lepe'], residual=out)


def token_mixer(x: Tensor, weights: BlockWeights, cfg: AttentionConfig, kind: str, train: bool,
                capture: Capture = None) -> Tensor:
    """Aiguillage vers FAA ou XCA simple selon le type de bloc."""
    if kind == 'faa':
        return faa(x, weights, cfg, train, capture=capture)
    if kind == 'xca':
        return xca_block(x, weights, cfg.heads, capture)
    raise ValueError(f"Mélangeur de jetons inconnu : {kind}")

