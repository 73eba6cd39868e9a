"""
Module du modèle : réseaux hiérarchiques à quatre étages pour les cinq
variantes (Proto, ConvScat1, ConvScat2, ScatterFormer, FourierFormer),
inventaire des paramètres et points de sauvegarde.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Literal, MutableMapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import numerics
from attention import AttentionConfig, BlockWeights, init_faa, init_xca_block, token_mixer
from file_operations import IntegrityError, load_blob, read_json, sanitize_filename, save_blob, write_json
from numerics import BatchNormState, ShapeError, Tensor
from scattering import ScatteringLayerConfig, output_channels, scattering_embed

logger = logging.getLogger(__name__)

TOY_PARAMETER_BUDGET = 1_500_000
MANIFEST_NAME = 'manifest.json'

Variant = Literal['Proto', 'ConvScat1', 'ConvScat2', 'ScatterFormer', 'FourierFormer']


@dataclass(frozen=True)
class VariantPreset:
    """Placement de la diffusion et type de mélangeur de jetons d'une variante."""
    stem: Literal['conv', 'scattering']
    merges: Tuple[str, str]
    mixer: Literal['xca', 'faa']
    q_mode: Literal['scattering', 'lfu'] = 'scattering'


PRESETS: Dict[str, VariantPreset] = {
    'Proto': VariantPreset('conv', ('conv', 'conv'), 'xca'),
    'ConvScat1': VariantPreset('scattering', ('conv', 'conv'), 'xca'),
    'ConvScat2': VariantPreset('scattering', ('scattering', 'conv'), 'xca'),
    'ScatterFormer': VariantPreset('scattering', ('scattering', 'scattering'), 'faa', 'scattering'),
    'FourierFormer': VariantPreset('conv', ('conv', 'conv'), 'faa', 'lfu'),
}


PAPER_MLP_RATIO = 4
TOY_MLP_RATIO = 2


class ModelConfig(BaseModel):
    """Hyperparamètres de l'architecture (échelle réduite par défaut)."""
    model_config = ConfigDict(frozen=True)

    variant: Variant = 'ScatterFormer'
    stage_dims: Tuple[int, int, int, int] = (32, 64, 128, 256)
    stage_depths: Tuple[int, int, int, int] = (1, 1, 2, 1)
    heads: Tuple[int, int, int, int] = (2, 2, 4, 4)
    input_shape: Tuple[int, int, int] = (3, 96, 256)
    num_classes: int = Field(2, ge=2)
    scale: Literal['toy', 'paper'] = 'toy'
    mlp_ratio: int = Field(PAPER_MLP_RATIO, ge=1)
    activation: Literal['mish', 'swish'] = 'mish'
    L: int = Field(4, ge=1)
    init_std: float = Field(0.02, gt=0)

    @model_validator(mode='before')
    @classmethod
    def _toy_mlp_ratio(cls, data):
        # À l'échelle réduite, un MLP ×2 tient dans le budget de paramètres
        if isinstance(data, dict) and 'mlp_ratio' not in data and data.get('scale', 'toy') == 'toy':
            data = {**data, 'mlp_ratio': TOY_MLP_RATIO}
        return data

    @model_validator(mode='after')
    def _check_shapes(self):
        for dim, heads in zip(self.stage_dims, self.heads):
            if dim % (2 * heads):
                raise ValueError(f"Largeur {dim} non divisible par 2 × {heads} têtes")
        _, h, w = self.input_shape
        if h % 16 or w % 16:
            raise ValueError(f"Entrée {h}×{w} non divisible par 16 (souche ×4 puis deux fusions ×2)")
        if self.preset.mixer == 'faa':
            for i, (sh, sw) in enumerate(self.stage_shapes()):
                if sh % 2 or sw % 2:
                    raise ValueError(f"Étage {i + 1} de taille impaire {sh}×{sw} incompatible avec FAA")
                if self.preset.q_mode == 'scattering' and min(sh, sw) < 4:
                    raise ValueError(f"Étage {i + 1} de taille {sh}×{sw} trop petit pour la diffusion")
        return self

    @property
    def preset(self) -> VariantPreset:
        return PRESETS[self.variant]

    def last_stage_downsamples(self) -> bool:
        """Vrai si le quatrième étage peut diviser la résolution par deux (moitiés paires, ≥ 4)."""
        _, h, w = self.input_shape
        h3, w3 = h // 16, w // 16
        return h3 % 4 == 0 and w3 % 4 == 0 and min(h3, w3) // 2 >= 4

    def stage_shapes(self) -> List[Tuple[int, int]]:
        """Résolutions spatiales des quatre étages ; le quatrième garde celle du troisième si elle est trop petite."""
        _, h, w = self.input_shape
        s1 = (h // 4, w // 4)
        s2 = (s1[0] // 2, s1[1] // 2)
        s3 = (s2[0] // 2, s2[1] // 2)
        s4 = (s3[0] // 2, s3[1] // 2) if self.last_stage_downsamples() else s3
        return [s1, s2, s3, s4]

    def merge_kinds(self) -> Tuple[str, str, str]:
        """Fusions de jetons en tête des étages 2 à 4."""
        last = self.preset.merges[-1] if self.last_stage_downsamples() else 'pointwise'
        return self.preset.merges[0], self.preset.merges[1], last

    @classmethod
    def paper(cls, variant: Variant = 'ScatterFormer') -> 'ModelConfig':
        """Configuration pleine échelle (entrée 3×768×256), exprimable mais non entraînée ici."""
        return cls(variant=variant, stage_dims=(64, 128, 320, 512), stage_depths=(2, 2, 6, 2),
                   heads=(2, 4, 8, 8), input_shape=(3, 768, 256), scale='paper', mlp_ratio=PAPER_MLP_RATIO)


@dataclass
class ParamStore:
    """Paramètres nommés (chemin → tenseur) et statistiques de normalisation."""
    params: Dict[str, Tensor] = field(default_factory=dict)
    buffers: Dict[str, BatchNormState] = field(default_factory=dict)

    def register(self, prefix: str, weights: BlockWeights) -> BlockWeights:
        for name, tensor in weights.params.items():
            path = f"{prefix}.{name}"
            if path in self.params:
                raise ValueError(f"Paramètre déjà enregistré : {path}")
            tensor.name = path
            self.params[path] = tensor
        for name, state in weights.bn.items():
            self.buffers[f"{prefix}.{name}"] = state
        return weights

    def count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def tensors(self) -> List[Tensor]:
        return list(self.params.values())

    def buffer_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for name, state in self.buffers.items():
            arrays[f"{name}.running_mean"] = state.running_mean
            arrays[f"{name}.running_var"] = state.running_var
        return arrays

    def snapshot(self) -> Dict[str, np.ndarray]:
        """Copie des paramètres et statistiques courantes."""
        out = {name: p.data.copy() for name, p in self.params.items()}
        out.update({name: a.copy() for name, a in self.buffer_arrays().items()})
        return out

    def restore(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = np.array(arrays[name], dtype=p.dtype, order='C')
        for name, state in self.buffers.items():
            state.running_mean = np.array(arrays[f"{name}.running_mean"])
            state.running_var = np.array(arrays[f"{name}.running_var"])


def _bn_weights(channels: int) -> Tuple[Dict[str, Tensor], BatchNormState]:
    return {'gamma': numerics.ones((channels,)), 'beta': numerics.zeros((channels,))}, BatchNormState.fresh(channels)


def _with_norm(params: Dict[str, Tensor], bn: Dict[str, BatchNormState], name: str, channels: int) -> None:
    norm, state = _bn_weights(channels)
    params[f'{name}.gamma'] = norm['gamma']
    params[f'{name}.beta'] = norm['beta']
    bn[name] = state


@dataclass
class Stage:
    merge: Optional[BlockWeights]
    merge_kind: str
    blocks: List[Tuple[BlockWeights, BlockWeights]]
    attention: AttentionConfig


class Model:
    """Réseau construit par `build_model` ; les poids vivent dans `store`."""

    def __init__(self, cfg: ModelConfig, store: ParamStore, stem: BlockWeights, stages: List[Stage],
                 head: BlockWeights):
        self.cfg = cfg
        self.store = store
        self.stem = stem
        self.stages = stages
        self.head = head

    def parameters(self) -> List[Tensor]:
        return self.store.tensors()

    def scattering_layers(self) -> List[str]:
        """Couches utilisant un banc de diffusion (audit structurel)."""
        preset = self.cfg.preset
        layers = ['stem'] if preset.stem == 'scattering' else []
        layers += [f'stage{i + 2}.merge' for i, kind in enumerate(self.cfg.merge_kinds()) if kind == 'scattering']
        if preset.mixer == 'faa' and preset.q_mode == 'scattering':
            layers += [f'stage{i + 1}.block{j}.mixer'
                       for i, stage in enumerate(self.stages) for j in range(len(stage.blocks))]
        return layers

    def inventory(self) -> Dict[str, int]:
        """Nombre de paramètres par composant de premier niveau."""
        counts: Dict[str, int] = {}
        for name, p in self.store.params.items():
            top = name.split('.')[0]
            counts[top] = counts.get(top, 0) + p.size
        return counts

    def forward(self, batch, train: bool = False,
                capture: Optional[MutableMapping[str, np.ndarray]] = None) -> Tensor:
        return forward(self, batch, 'train' if train else 'eval', capture)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def _stem_weights(cfg: ModelConfig, rng: np.random.Generator) -> BlockWeights:
    c_in, c1 = cfg.input_shape[0], cfg.stage_dims[0]
    tn, std = numerics.trunc_normal, cfg.init_std
    params: Dict[str, Tensor] = {}
    bn: Dict[str, BatchNormState] = {}
    if cfg.preset.stem == 'scattering':
        params['proj'] = tn(rng, (c1, output_channels(c_in, 2, 2, cfg.L)), std)
        _with_norm(params, bn, 'norm', c1)
    else:
        params['conv1'] = tn(rng, (c1 // 2, c_in, 3, 3), std)
        _with_norm(params, bn, 'norm1', c1 // 2)
        params['conv2'] = tn(rng, (c1, c1 // 2, 3, 3), std)
        _with_norm(params, bn, 'norm', c1)
    return BlockWeights(params, bn)


def _merge_weights(kind: str, c_in: int, c_out: int, cfg: ModelConfig, rng: np.random.Generator) -> BlockWeights:
    tn, std = numerics.trunc_normal, cfg.init_std
    params: Dict[str, Tensor] = {}
    bn: Dict[str, BatchNormState] = {}
    if kind == 'scattering':
        params['proj'] = tn(rng, (c_out, output_channels(c_in, 1, 1, cfg.L)), std)
    elif kind == 'conv':
        params['conv'] = tn(rng, (c_out, c_in, 3, 3), std)
    elif kind == 'pointwise':
        params['proj'] = tn(rng, (c_out, c_in), std)
    else:
        raise ValueError(f"Fusion de jetons inconnue : {kind}")
    _with_norm(params, bn, 'norm', c_out)
    return BlockWeights(params, bn)


def _mlp_weights(dim: int, cfg: ModelConfig, rng: np.random.Generator) -> BlockWeights:
    tn, std = numerics.trunc_normal, cfg.init_std
    hidden = dim * cfg.mlp_ratio
    params = {
        'fc1.weight': tn(rng, (hidden, dim), std), 'fc1.bias': numerics.zeros((hidden,)),
        'fc2.weight': tn(rng, (dim, hidden), std), 'fc2.bias': numerics.zeros((dim,)),
    }
    bn: Dict[str, BatchNormState] = {}
    _with_norm(params, bn, 'norm', dim)
    return BlockWeights(params, bn)


def _mixer_weights(att: AttentionConfig, kind: str, cfg: ModelConfig, rng: np.random.Generator) -> BlockWeights:
    weights = init_faa(att, rng, cfg.init_std) if kind == 'faa' else init_xca_block(att.dim, att.heads, rng, cfg.init_std)
    _with_norm(weights.params, weights.bn, 'pre_norm', att.dim)
    return weights


def build_model(cfg: ModelConfig, rng: np.random.Generator) -> Model:
    """
    Construit la variante demandée, poids tirés de `rng` dans un ordre fixe.

    Raises:
        ValueError: budget de paramètres dépassé à l'échelle réduite
    """
    preset = cfg.preset
    store = ParamStore()
    stem = store.register('stem', _stem_weights(cfg, rng))
    stages: List[Stage] = []
    shapes, merge_kinds = cfg.stage_shapes(), cfg.merge_kinds()
    for i, (dim, depth, heads) in enumerate(zip(cfg.stage_dims, cfg.stage_depths, cfg.heads)):
        spatial = shapes[i] if preset.q_mode == 'lfu' else None
        att = AttentionConfig(dim=dim, heads=heads, L=cfg.L, q_mode=preset.q_mode, spatial=spatial)
        merge, merge_kind = None, 'none'
        if i > 0:
            merge_kind = merge_kinds[i - 1]
            merge = store.register(f'stage{i + 1}.merge',
                                   _merge_weights(merge_kind, cfg.stage_dims[i - 1], dim, cfg, rng))
        blocks = []
        for j in range(depth):
            mixer = store.register(f'stage{i + 1}.block{j}.mixer', _mixer_weights(att, preset.mixer, cfg, rng))
            mlp = store.register(f'stage{i + 1}.block{j}.mlp', _mlp_weights(dim, cfg, rng))
            blocks.append((mixer, mlp))
        stages.append(Stage(merge, merge_kind, blocks, att))
    head = store.register('head', BlockWeights({
        'weight': numerics.trunc_normal(rng, (cfg.num_classes, cfg.stage_dims[-1]), cfg.init_std),
        'bias': numerics.zeros((cfg.num_classes,)),
    }))
    count = store.count()
    if cfg.scale == 'toy' and count > TOY_PARAMETER_BUDGET:
        raise ValueError(f"{cfg.variant} : {count} paramètres, budget réduit {TOY_PARAMETER_BUDGET}")
    logger.info("Modèle %s construit : %d paramètres", cfg.variant, count)
    return Model(cfg, store, stem, stages, head)


# ---------------------------------------------------------------------------
# Propagation
# ---------------------------------------------------------------------------

def _activation(cfg: ModelConfig):
    return numerics.mish if cfg.activation == 'mish' else numerics.swish


def _norm(x: Tensor, weights: BlockWeights, name: str, train: bool) -> Tensor:
    return numerics.batch_norm(x, weights[f'{name}.gamma'], weights[f'{name}.beta'], weights.bn[name], train)


def _stem(model: Model, x: Tensor, train: bool) -> Tensor:
    cfg, w = model.cfg, model.stem
    if cfg.preset.stem == 'scattering':
        layer = ScatteringLayerConfig(order=2, J_layer=2, L=cfg.L, out_channels=cfg.stage_dims[0])
        return _norm(scattering_embed(x, layer, projection=w['proj']), w, 'norm', train)
    act = _activation(cfg)
    x = act(_norm(numerics.strided_conv2d(x, w['conv1'], (2, 2)), w, 'norm1', train))
    return _norm(numerics.strided_conv2d(x, w['conv2'], (2, 2)), w, 'norm', train)


def _merge(model: Model, stage: Stage, x: Tensor, train: bool) -> Tensor:
    w = stage.merge
    if stage.merge_kind == 'scattering':
        layer = ScatteringLayerConfig(order=1, J_layer=1, L=model.cfg.L, out_channels=stage.attention.dim)
        y = scattering_embed(x, layer, projection=w['proj'])
    elif stage.merge_kind == 'conv':
        y = numerics.strided_conv2d(x, w['conv'], (2, 2))
    else:
        y = numerics.pointwise_conv(x, w['proj'])
    return _norm(y, w, 'norm', train)


def _mlp(model: Model, w: BlockWeights, x: Tensor, train: bool) -> Tensor:
    y = _norm(x, w, 'norm', train)
    y = _activation(model.cfg)(numerics.pointwise_conv(y, w['fc1.weight'], w['fc1.bias']))
    return numerics.pointwise_conv(y, w['fc2.weight'], w['fc2.bias'])


def forward(model: Model, batch, mode: str = 'eval',
            capture: Optional[MutableMapping[str, np.ndarray]] = None) -> Tensor:
    """
    Logits (N, num_classes) d'un lot (N, 3, H, W).

    En mode 'eval' la normalisation utilise les statistiques courantes et
    chaque échantillon est traité indépendamment du lot.

    Args:
        model: Réseau issu de `build_model`
        batch: Tableau ou tenseur (N, C, H, W)
        mode: 'train' ou 'eval'
        capture: Dictionnaire recevant attention et cartes intermédiaires

    Raises:
        ShapeError: lot incompatible avec la configuration
        NumericalError: activations non finies (la couche fautive est nommée)
    """
    if mode not in ('train', 'eval'):
        raise ValueError(f"Mode inconnu : {mode}")
    train = mode == 'train'
    cfg = model.cfg
    x = numerics.as_tensor(batch)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(cfg.input_shape):
        raise ShapeError(f"Lot {x.shape} incompatible avec l'entrée {cfg.input_shape}")

    x = _stem(model, x, train)
    numerics.check_finite(x, 'stem')
    for i, stage in enumerate(model.stages):
        name = f'stage{i + 1}'
        if stage.merge is not None:
            x = _merge(model, stage, x, train)
            numerics.check_finite(x, f'{name}.merge')
        for j, (mixer, mlp) in enumerate(stage.blocks):
            local = {} if capture is not None else None
            y = _norm(x, mixer, 'pre_norm', train)
            x = numerics.add(x, token_mixer(y, mixer, stage.attention, cfg.preset.mixer, train, local))
            x = numerics.add(x, _mlp(model, mlp, x, train))
            numerics.check_finite(x, f'{name}.block{j}')
            if capture is not None:
                capture.update({f'{name}.block{j}.{k}': v for k, v in local.items()})
        if capture is not None:
            capture[name] = x.data.copy()

    pooled = numerics.mean(x, axis=(2, 3))
    logits = numerics.linear(pooled, model.head['weight'], model.head['bias'])
    numerics.check_finite(logits, 'head')
    return logits


def predict_proba(model: Model, batch) -> np.ndarray:
    """Probabilités softmax en mode évaluation."""
    with numerics.no_record():
        logits = forward(model, batch, 'eval')
        return numerics.softmax(logits, axis=1).data


def iterate_batches(images: np.ndarray, batch_size: int) -> Iterator[np.ndarray]:
    for start in range(0, len(images), batch_size):
        yield images[start:start + batch_size]


# ---------------------------------------------------------------------------
# Points de sauvegarde
# ---------------------------------------------------------------------------

def _blob_dtype(array: np.ndarray) -> str:
    return 'f64' if array.dtype == np.float64 else 'f32'


def save_checkpoint(model: Model, directory: Path, extra: Optional[dict] = None) -> Path:
    """
    Écrit un blob par paramètre et par statistique, puis le manifeste JSON.

    Returns:
        Chemin du manifeste
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    arrays = {name: p.data for name, p in model.store.params.items()}
    arrays.update(model.store.buffer_arrays())
    for name, array in arrays.items():
        stem = directory / sanitize_filename(name)
        save_blob(stem, array, _blob_dtype(array))
        entries[name] = {'file': stem.name, 'shape': list(array.shape), 'dtype': _blob_dtype(array)}
    manifest = {
        'config': model.cfg.model_dump(mode='json'),
        'parameters': entries,
        'parameter_count': model.store.count(),
        'extra': extra or {},
    }
    path = directory / MANIFEST_NAME
    write_json(path, manifest)
    logger.info("Point de sauvegarde écrit : %s (%d tableaux)", directory, len(entries))
    return path


def load_checkpoint(directory: Path) -> Tuple[Model, dict]:
    """
    Reconstruit le modèle puis charge chaque tableau depuis son blob.

    Raises:
        IntegrityError: manifeste absent, blob manquant ou forme incohérente (paramètre nommé)
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise IntegrityError(f"Manifeste absent : {manifest_path}")
    manifest = read_json(manifest_path)
    cfg = ModelConfig(**manifest['config'])
    model = build_model(cfg, np.random.default_rng(0))
    expected = set(model.store.params) | set(model.store.buffer_arrays())
    if set(manifest['parameters']) != expected:
        missing = sorted(expected - set(manifest['parameters']))
        raise IntegrityError(f"Manifeste incohérent avec l'architecture (absents : {missing[:3]})")
    arrays = {}
    for name, entry in manifest['parameters'].items():
        try:
            array = load_blob(directory / entry['file'])
        except IntegrityError as e:
            raise IntegrityError(f"Paramètre '{name}' : {e}") from e
        if list(array.shape) != entry['shape']:
            raise IntegrityError(f"Paramètre '{name}' : forme {array.shape}, attendue {entry['shape']}")
        arrays[name] = array
    model.store.restore(arrays)
    return model, manifest.get('extra', {})
