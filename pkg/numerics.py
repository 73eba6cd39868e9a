"""Module de calcul numérique : tenseurs, FFT, opérations de réseau et ruban de différentiation.

Toutes les autres briques (ondelettes, diffusion, attention, modèle) s'appuient sur
les primitives définies ici. Chaque primitive calcule sa sortie avec numpy et, si un
ruban est actif et qu'une entrée demande un gradient, enregistre la fonction de
rétropropagation correspondante.
"""

import contextlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sp_fft
from scipy import stats

logger = logging.getLogger(__name__)

_DTYPES = {'f32': np.float32, 'f64': np.float64}
_state = {'precision': 'f32'}

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
FFT_WORKERS = -1
NORM_EPS = 1e-6


class ShapeError(ValueError):
    """Formes incompatibles entre opérandes."""


class NumericalError(ArithmeticError):
    """Valeur non finie ou hors du domaine d'une opération."""


def set_precision(name: str) -> None:
    """
    Fixe la précision par défaut des nouveaux tenseurs.

    Args:
        name: 'f32' ou 'f64'
    """
    if name not in _DTYPES:
        raise ValueError(f"Précision inconnue : {name} (attendu : f32 ou f64)")
    _state['precision'] = name


def get_precision() -> str:
    return _state['precision']


def get_dtype() -> type:
    return _DTYPES[_state['precision']]


@contextlib.contextmanager
def precision(name: str):
    """Change temporairement la précision par défaut."""
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """
    Tableau réel dense avec emplacement de gradient.

    Les données ne sont jamais modifiées en place par les opérations : chaque
    primitive produit un nouveau tenseur.
    """

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_dtype(), order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> 'Tensor':
        out = cls.__new__(cls)
        out.data = np.asarray(data, order="C")
        out.requires_grad = False
        out.grad = None
        out.name = ""
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor._wrap(self.data)

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add_scalar(self, other) if np.isscalar(other) else add(self, other)

    def __sub__(self, other):
        return add_scalar(self, -other) if np.isscalar(other) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if np.isscalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    """Convertit un tableau en tenseur constant (sans gradient)."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


@dataclass
class ComplexTensor:
    """Paire (partie réelle, partie imaginaire) de tenseurs de même forme."""
    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ShapeError(f"Parties réelle {self.re.shape} et imaginaire {self.im.shape} incompatibles")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.re.shape

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data


# ---------------------------------------------------------------------------
# Ruban
# ---------------------------------------------------------------------------

@dataclass
class TapeEntry:
    """Opération primitive enregistrée."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """
    Liste ordonnée des opérations enregistrées pendant une passe avant.

    L'ordre d'enregistrement est topologique : les entrées d'une opération
    sont toujours produites avant elle. Le ruban est à écrivain unique ;
    chaque thread a son propre ruban actif.
    """
    entries: List[TapeEntry] = field(default_factory=list)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)

    def __enter__(self) -> 'Tape':
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


_local = threading.local()


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, 'stack'):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_record():
    """Suspend l'enregistrement (évaluation, calculs d'analyse)."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(TapeEntry(op, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> List[np.ndarray]:
    """
    Rétropropagation en mode inverse sur le ruban.

    Args:
        tape: Ruban complet de la passe avant
        loss: Tenseur scalaire
        params: Feuilles dont on veut le gradient (toutes les feuilles du ruban si None)

    Returns:
        Gradients des paramètres, dans l'ordre de `params`. Un paramètre
        déconnecté de la perte reçoit un gradient nul.
    """
    if loss.size != 1:
        raise ShapeError(f"La perte doit être scalaire, forme reçue {loss.shape}")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for entry in reversed(tape.entries):
        produced.add(id(entry.output))
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        input_grads = entry.backward(g)
        for tensor, gi in zip(entry.inputs, input_grads):
            if gi is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grads[key] + gi if key in grads else gi

    if params is None:
        seen = {}
        for entry in tape.entries:
            for tensor in entry.inputs:
                if tensor.requires_grad and id(tensor) not in produced:
                    seen.setdefault(id(tensor), tensor)
        params = list(seen.values())

    result = []
    for p in params:
        g = grads.get(id(p))
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
        p.grad = g
        result.append(g)
    return result


# ---------------------------------------------------------------------------
# Primitives élémentaires
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} : formes {a.shape} et {b.shape} différentes (pas de diffusion implicite)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, 'add')
    return _record('add', (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, 'sub')
    return _record('sub', (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, 'mul')
    return _record('mul', (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _record('scale', (a,), a.data * c, lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _record('add_scalar', (a,), a.data + c, lambda g: (g,))


def _sum_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Diffusion explicite vers `shape` (seule forme de diffusion autorisée)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"Impossible de diffuser {a.shape} vers {shape}") from e
    return _record('broadcast_to', (a,), out, lambda g: (_sum_to(g, a.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul : formes {a.shape} et {b.shape} incompatibles")

    def _bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _record('matmul', (a, b), a.data @ b.data, _bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return _record('reshape', (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record('transpose', (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record('concat', tuple(tensors), out, _bw)


def take(a: Tensor, key) -> Tensor:
    """Indexation par tranches simples (sans indices répétés)."""
    def _bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _record('take', (a,), a.data[key], _bw)


def slice_axis(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    key = [slice(None)] * a.ndim
    key[axis] = slice(start, stop)
    return take(a, tuple(key))


def pad2d(a: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Complète de zéros les deux derniers axes."""
    widths = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    out = np.pad(a.data, widths)
    h, w = a.shape[-2:]
    return _record('pad2d', (a,), out, lambda g: (g[..., top:top + h, left:left + w],))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record('sum', (a,), np.asarray(out), _bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record('exp', (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericalError("log : entrée non strictement positive")
    return _record('log', (a,), np.log(a.data), lambda g: (g / a.data,))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def mish(a: Tensor) -> Tensor:
    """x · tanh(softplus(x))"""
    x = a.data
    t = np.tanh(_softplus(x))
    out = x * t

    def _bw(g):
        return (g * (t + x * (1.0 - t * t) * _sigmoid(x)),)

    return _record('mish', (a,), out, _bw)


def swish(a: Tensor) -> Tensor:
    """x · sigmoid(x)"""
    x = a.data
    s = _sigmoid(x)
    return _record('swish', (a,), x * s, lambda g: (g * (s + x * s * (1.0 - s)),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """
    Softmax stable (soustraction du maximum) le long de `axis`.

    Raises:
        NumericalError: si l'entrée contient des NaN
    """
    if np.isnan(a.data).any():
        raise NumericalError("softmax : entrée contenant des NaN")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record('softmax', (a,), out, _bw)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """x / (‖x‖ + eps) le long de `axis`."""
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    d = n + eps
    out = x / d

    def _bw(g):
        dot = (x * g).sum(axis=axis, keepdims=True)
        safe_n = np.where(n > 0, n, 1.0)
        corr = np.where(n > 0, dot / (safe_n * d * d), 0.0)
        return (g / d - x * corr,)

    return _record('l2_normalize', (a,), out, _bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """
    Entropie croisée moyenne entre softmax(logits) et des cibles souples.

    Args:
        logits: Tenseur (N, K)
        targets: Tableau (N, K) de probabilités (étiquettes MixUp)
    """
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ShapeError(f"cross_entropy : cibles {targets.shape} vs logits {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -(targets * log_p).sum() / n

    def _bw(g):
        p = np.exp(log_p)
        return (g * (p * targets.sum(axis=1, keepdims=True) - targets) / n,)

    return _record('cross_entropy', (logits,), np.asarray(loss, dtype=logits.dtype), _bw)


# ---------------------------------------------------------------------------
# FFT et convolution fréquentielle
# ---------------------------------------------------------------------------

def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_power_of_two(n: int) -> int:
    return 1 if n <= 1 else 1 << (int(n) - 1).bit_length()


def _check_fft_shape(shape: Tuple[int, ...], pad: bool) -> Tuple[int, int]:
    h, w = shape[-2:]
    if h < 1 or w < 1:
        raise ShapeError(f"Dimensions FFT invalides : {shape}")
    if not pad and not (is_power_of_two(h) and is_power_of_two(w)):
        raise ShapeError(
            f"FFT : dimensions {h}×{w} non puissances de deux ; "
            f"compléter de zéros (pad=True) jusqu'à {next_power_of_two(h)}×{next_power_of_two(w)}"
        )
    return next_power_of_two(h), next_power_of_two(w)


def fft2(x: np.ndarray, pad: bool = False) -> np.ndarray:
    """
    Transformée de Fourier discrète 2-D unitaire sur les deux derniers axes.

    Args:
        x: Tableau réel ou complexe
        pad: Complète de zéros jusqu'aux puissances de deux suivantes

    Returns:
        Spectre complexe (convention unitaire : Parseval exact)
    """
    x = np.asarray(x)
    ph, pw = _check_fft_shape(x.shape, pad)
    h, w = x.shape[-2:]
    if (ph, pw) != (h, w):
        widths = [(0, 0)] * (x.ndim - 2) + [(0, ph - h), (0, pw - w)]
        x = np.pad(x, widths)
    return np.fft.fft2(x, norm='ortho')


def ifft2(x_hat: np.ndarray) -> np.ndarray:
    """Inverse de `fft2` (convention unitaire)."""
    x_hat = np.asarray(x_hat)
    _check_fft_shape(x_hat.shape, pad=False)
    return np.fft.ifft2(x_hat, norm='ortho')


def transfer_function(h: np.ndarray, shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    Fonction de transfert d'un noyau spatial (TFD non normalisée).

    Avec cette convention, conv2d_fft(impulsion, transfer_function(h)) = h.
    """
    return np.fft.fft2(np.asarray(h), s=shape)


def _spectral(x: np.ndarray) -> np.ndarray:
    """fft2 non normalisée en précision de travail (complex64 pour f32)."""
    return sp_fft.fft2(x, workers=FFT_WORKERS)


def _spatial(x_hat: np.ndarray) -> np.ndarray:
    return sp_fft.ifft2(x_hat, workers=FFT_WORKERS)


def _working_filter(filter_hat: np.ndarray, dtype) -> np.ndarray:
    complex_dtype = np.complex64 if np.dtype(dtype) == np.float32 else np.complex128
    return np.asarray(filter_hat).astype(complex_dtype, copy=False)


def conv2d_fft(x, filter_hat: np.ndarray) -> ComplexTensor:
    """
    Convolution circulaire ifft2(fft2(x) ⊙ filter_hat) sur les deux derniers axes.

    Une pile de K filtres (K, H, W) donne une sortie (..., K, H, W) ; la fft2
    de l'entrée est alors calculée une seule fois. Le remplissage aux bords
    est à la charge de l'appelant.

    Args:
        x: Tenseur réel (..., H, W)
        filter_hat: Fonction de transfert complexe (H, W) ou pile (K, H, W)

    Returns:
        Sortie complexe sous forme (re, im)
    """
    x = as_tensor(x)
    filter_hat = np.asarray(filter_hat)
    if filter_hat.ndim not in (2, 3) or filter_hat.shape[-2:] != x.shape[-2:]:
        raise ShapeError(f"conv2d_fft : filtre {filter_hat.shape} vs entrée {x.shape[-2:]}")
    dtype = x.dtype
    stacked = filter_hat.ndim == 3
    filt = _working_filter(filter_hat, dtype)
    x_hat = _spectral(x.data)
    z = _spatial((x_hat[..., None, :, :] if stacked else x_hat) * filt)

    def _adjoint(g):
        g_hat = _spectral(g) * np.conj(filt)
        return _spatial(g_hat.sum(axis=-3) if stacked else g_hat)

    re = _record('conv2d_fft.re', (x,), z.real.astype(dtype), lambda g: (_adjoint(g).real.astype(dtype),))
    im = _record('conv2d_fft.im', (x,), z.imag.astype(dtype), lambda g: ((-_adjoint(g).imag).astype(dtype),))
    return ComplexTensor(re, im)


def lowpass_subsample(x, filter_hat: np.ndarray, step: int = 1) -> Tensor:
    """
    Re(ifft2(fft2(x) ⊙ filter_hat)) prélevé toutes les `step` positions par axe.

    Le spectre filtré est replié sur la grille (H/step, W/step) avant
    l'inverse, ce qui donne exactement le sous-échantillonnage de la
    convolution pleine résolution.

    Args:
        x: Tenseur réel (..., H, W), H et W divisibles par step
        filter_hat: Fonction de transfert (H, W)
        step: Pas de sous-échantillonnage

    Returns:
        Tenseur réel (..., H/step, W/step)
    """
    x = as_tensor(x)
    filter_hat = np.asarray(filter_hat)
    h, w = x.shape[-2:]
    if filter_hat.shape != (h, w):
        raise ShapeError(f"lowpass_subsample : filtre {filter_hat.shape} vs entrée {(h, w)}")
    if step < 1 or h % step or w % step:
        raise ShapeError(f"lowpass_subsample : {h}×{w} non divisible par le pas {step}")
    dtype = x.dtype
    lead = x.shape[:-2]
    filt = _working_filter(filter_hat, dtype)
    y_hat = _spectral(x.data) * filt
    folded = y_hat.reshape(lead + (step, h // step, step, w // step)).sum(axis=(-4, -2))
    out = (_spatial(folded).real / step ** 2).astype(dtype)

    def _bw(g):
        tiled = np.tile(_spectral(g), (1,) * len(lead) + (step, step))
        return (_spatial(tiled * np.conj(filt)).real.astype(dtype),)

    return _record('lowpass_subsample', (x,), out, _bw)


def modulus(z: ComplexTensor) -> Tensor:
    """
    |z| ; le sous-gradient en z = 0 est fixé à 0.
    """
    re, im = z.re.data, z.im.data
    m = np.sqrt(re * re + im * im)

    def _bw(g):
        safe = m > 0
        denom = np.where(safe, m, 1.0)
        return np.where(safe, g * re / denom, 0.0), np.where(safe, g * im / denom, 0.0)

    return _record('modulus', (z.re, z.im), m, _bw)


def local_fourier_unit(x: Tensor, w_re: Tensor, w_im: Tensor, gain_re: Tensor, gain_im: Tensor) -> Tensor:
    """
    Unité de Fourier locale : FFT2 par canal, gain spectral complexe propre
    à chaque canal et à chaque fréquence, mélange complexe des canaux,
    FFT2 inverse, partie réelle.

    Le poids effectif à la fréquence ω est w[o, c]·gain[c, ω] ; il n'est pas
    hermitien en général, si bien que la partie imaginaire agit aussi.

    Args:
        x: Tenseur (N, C, H, W)
        w_re, w_im: Poids de mélange (C_out, C)
        gain_re, gain_im: Gain spectral (C, H, W) sur la grille de fft2
    """
    if x.ndim != 4 or w_re.shape != w_im.shape or w_re.shape[1] != x.shape[1]:
        raise ShapeError(f"LFU : entrée {x.shape}, poids {w_re.shape}/{w_im.shape}")
    if gain_re.shape != gain_im.shape or tuple(gain_re.shape) != tuple(x.shape[1:]):
        raise ShapeError(f"LFU : gain {gain_re.shape}/{gain_im.shape} pour une entrée {x.shape}")
    dtype = x.dtype
    w = w_re.data + 1j * w_im.data
    gain = gain_re.data + 1j * gain_im.data
    x_hat = np.fft.fft2(x.data, norm='ortho')
    u = gain[None] * x_hat
    z_hat = np.einsum('oc,nchw->nohw', w, u)
    out = np.fft.ifft2(z_hat, norm='ortho').real.astype(dtype)

    def _bw(g):
        g_z = np.fft.fft2(g, norm='ortho')
        g_w = np.einsum('nohw,nchw->oc', g_z, np.conj(u))
        g_u = np.einsum('oc,nohw->nchw', np.conj(w), g_z)
        g_gain = np.sum(g_u * np.conj(x_hat), axis=0)
        gx = np.fft.ifft2(np.conj(gain)[None] * g_u, norm='ortho').real
        return (gx.astype(dtype), g_w.real.astype(dtype), g_w.imag.astype(dtype),
                g_gain.real.astype(dtype), g_gain.imag.astype(dtype))

    return _record('local_fourier_unit', (x, w_re, w_im, gain_re, gain_im), out, _bw)


# ---------------------------------------------------------------------------
# Convolutions spatiales
# ---------------------------------------------------------------------------

def _same_padding(size: int, k: int, s: int) -> Tuple[int, int, int]:
    """Remplissage symétrique (k-1)//2 ; sortie ⌈size/s⌉ pour les noyaux impairs."""
    pad = (k - 1) // 2
    if size + 2 * pad < k:
        raise ShapeError(f"Noyau de taille {k} plus grand que l'entrée complétée ({size} + 2×{pad})")
    return (size + 2 * pad - k) // s + 1, pad, pad


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return cols[:, :, ::sh, ::sw][:, :, :oh, :ow]


def _col2im(gcols: np.ndarray, padded_shape, kh, kw, sh, sw, oh, ow) -> np.ndarray:
    gxp = np.zeros(padded_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw] += gcols[..., i, j]
    return gxp


def strided_conv2d(x: Tensor, weights: Tensor, stride: Tuple[int, int] = (1, 1)) -> Tensor:
    """
    Corrélation croisée 2-D avec remplissage de zéros « same ».

    Args:
        x: Tenseur (N, C, H, W)
        weights: Noyaux (O, C, kh, kw)
        stride: Pas (sh, sw)

    Returns:
        Tenseur (N, O, ⌈H/sh⌉, ⌈W/sw⌉)
    """
    if x.ndim != 4 or weights.ndim != 4 or weights.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d : entrée {x.shape}, noyaux {weights.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weights.shape
    sh, sw = stride
    oh, pt, pb = _same_padding(h, kh, sh)
    ow, pl, pr = _same_padding(w, kw, sw)
    xp = np.pad(x.data, [(0, 0), (0, 0), (pt, pb), (pl, pr)])
    cols = _windows(xp, kh, kw, sh, sw, oh, ow)
    out = np.tensordot(cols, weights.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def _bw(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, weights.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        gxp = _col2im(gcols, xp.shape, kh, kw, sh, sw, oh, ow)
        return gxp[:, :, pt:pt + h, pl:pl + w], gw

    return _record('strided_conv2d', (x, weights), np.ascontiguousarray(out), _bw)


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: Tuple[int, int] = (1, 1)) -> Tensor:
    """Convolution en profondeur : un noyau (kh, kw) par canal, noyaux (C, kh, kw)."""
    if x.ndim != 4 or kernel.ndim != 3 or kernel.shape[0] != x.shape[1]:
        raise ShapeError(f"dwconv : entrée {x.shape}, noyaux {kernel.shape}")
    n, c, h, w = x.shape
    _, kh, kw = kernel.shape
    sh, sw = stride
    oh, pt, pb = _same_padding(h, kh, sh)
    ow, pl, pr = _same_padding(w, kw, sw)
    xp = np.pad(x.data, [(0, 0), (0, 0), (pt, pb), (pl, pr)])
    cols = _windows(xp, kh, kw, sh, sw, oh, ow)
    out = np.einsum('nchwij,cij->nchw', cols, kernel.data)

    def _bw(g):
        gk = np.einsum('nchwij,nchw->cij', cols, g)
        gcols = np.einsum('nchw,cij->nchwij', g, kernel.data)
        gxp = _col2im(gcols, xp.shape, kh, kw, sh, sw, oh, ow)
        return gxp[:, :, pt:pt + h, pl:pl + w], gk

    return _record('depthwise_conv2d', (x, kernel), out, _bw)


def pointwise_conv(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Projection linéaire 1×1 des canaux : (N, C, H, W) → (N, O, H, W), poids (O, C)."""
    if x.ndim != 4 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"projection : entrée {x.shape}, poids {weight.shape}")
    out = np.einsum('oc,nchw->nohw', weight.data, x.data)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        gx = np.einsum('oc,nohw->nchw', weight.data, g)
        gw = np.einsum('nohw,nchw->oc', g, x.data)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record('pointwise_conv', inputs, out, _bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """(N, C) → (N, O) avec poids (O, C)."""
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"linear : entrée {x.shape}, poids {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data[None, :]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return _record('linear', inputs, out, _bw)


def avg_pool2x(x: Tensor) -> Tensor:
    """Moyenne sur des blocs 2×2 (dimensions spatiales paires)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x : dimensions impaires {h}×{w}")
    return mean(reshape(x, (n, c, h // 2, 2, w // 2, 2)), axis=(3, 5))


# ---------------------------------------------------------------------------
# Normalisation et rééchantillonnage
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Statistiques courantes d'une normalisation par lot."""
    running_mean: Optional[np.ndarray]
    running_var: Optional[np.ndarray]

    @classmethod
    def fresh(cls, channels: int) -> 'BatchNormState':
        dtype = get_dtype()
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               train: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """
    Normalisation par canal puis échelle/décalage affine.

    En mode entraînement, les statistiques du lot sont utilisées et les
    statistiques courantes sont mises à jour (moment `momentum`). En mode
    évaluation, seules les statistiques courantes servent.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm : entrée {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.size // x.shape[1]
        unbiased = var * count / max(count - 1, 1)
        state.running_mean = ((1 - momentum) * state.running_mean + momentum * mu).astype(x.dtype)
        state.running_var = ((1 - momentum) * state.running_var + momentum * unbiased).astype(x.dtype)
    else:
        if state.running_mean is None or state.running_var is None:
            raise ValueError("batch_norm : statistiques courantes absentes en mode évaluation")
        mu, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * x_hat + beta.data.reshape(shape)

    def _bw(g):
        g_gamma = (g * x_hat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        g_hat = g * gamma.data.reshape(shape)
        if train:
            m = x.size // x.shape[1]
            gx = (inv_std.reshape(shape) / m) * (
                m * g_hat
                - g_hat.sum(axis=axes, keepdims=True)
                - x_hat * (g_hat * x_hat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = g_hat * inv_std.reshape(shape)
        return gx, g_gamma, g_beta

    return _record('batch_norm', (x, gamma, beta), out.astype(x.dtype), _bw)


def bilinear_matrix(n_in: int, n_out: int, dtype=None) -> np.ndarray:
    """
    Matrice (n_out, n_in) d'interpolation bilinéaire, coins non alignés.
    """
    ratio = n_in / n_out
    src = (np.arange(n_out) + 0.5) * ratio - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    mat = np.zeros((n_out, n_in), dtype=dtype or get_dtype())
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Redimensionnement bilinéaire des deux derniers axes."""
    h, w = x.shape[-2:]
    if h < 1 or w < 1:
        raise ShapeError(f"bilinear_resize : dimensions {h}×{w}")
    ah = bilinear_matrix(h, out_h, x.dtype)
    aw = bilinear_matrix(w, out_w, x.dtype)
    out = np.einsum('oh,...hw,pw->...op', ah, x.data, aw)

    def _bw(g):
        return (np.einsum('oh,...op,pw->...hw', ah, g, aw),)

    return _record('bilinear_resize', (x,), out, _bw)


def bilinear_upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Suréchantillonnage bilinéaire d'un facteur entier."""
    h, w = x.shape[-2:]
    return bilinear_resize(x, h * factor, w * factor)


def check_finite(x: Tensor, where: str) -> None:
    """Lève NumericalError en nommant la couche si x contient des valeurs non finies."""
    if not np.all(np.isfinite(x.data)):
        raise NumericalError(f"Activations non finies dans la couche '{where}'")


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape: Sequence[int], std: float = 0.02, name: str = "") -> Tensor:
    """Poids tirés d'une normale tronquée à ±2σ, gradient demandé."""
    values = stats.truncnorm.rvs(-2.0, 2.0, scale=std, size=tuple(shape), random_state=rng)
    return Tensor(values, requires_grad=True, name=name)


def zeros(shape: Sequence[int], name: str = "") -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=True, name=name)


def ones(shape: Sequence[int], name: str = "") -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=True, name=name)
