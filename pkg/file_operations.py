"""Module pour gérer les opérations de fichiers (blobs de tenseurs, époques EEG, manifestes)."""

import json
import logging
import os
import re
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np

logger = logging.getLogger(__name__)

BLOB_DTYPES = {'f32': '<f4', 'f64': '<f8'}


class IntegrityError(ValueError):
    """Manifeste, en-tête et données binaires incohérents."""


def sanitize_filename(name: str) -> str:
    """
    Nettoie un nom (paramètre, sujet, tag) pour le rendre utilisable comme nom de fichier.

    Args:
        name: Nom à nettoyer

    Returns:
        Nom nettoyé
    """
    # Remplacer les caractères interdits
    sanitized = re.sub(r'[<>:"/\\|?*]', '_', name)
    sanitized = re.sub(r'\s+', ' ', sanitized).strip()
    return sanitized[:200]


def build_output_name(original_path: Path, tags: List[str], extension: str, max_tags_in_filename: int = 5) -> str:
    """
    Construit un nom de fichier dérivé : {nom_original}_{tag1}_{tag2}.{ext}

    Args:
        original_path: Chemin du fichier source
        tags: Tags à inclure
        extension: Extension de sortie (avec le point)
        max_tags_in_filename: Nombre maximum de tags dans le nom

    Returns:
        Nouveau nom de fichier
    """
    cleaned = [sanitize_filename(tag).replace(' ', '-') for tag in tags[:max_tags_in_filename]]
    stem = original_path.stem
    if cleaned:
        stem = f"{stem}_{'_'.join(cleaned)}"
    return sanitize_filename(f"{stem}{extension}")


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Écrit via un fichier temporaire puis remplacement atomique."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, obj: Any) -> None:
    """JSON trié et indenté (sortie déterministe), écrit atomiquement."""
    text = json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + '\n'
    atomic_write_bytes(Path(path), text.encode('utf-8'))


def read_json(path: Path) -> Any:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def blob_paths(stem: Path) -> Tuple[Path, Path]:
    """Chemins (données, en-tête) d'un blob."""
    stem = Path(stem)
    return stem.with_name(stem.name + '.bin'), stem.with_name(stem.name + '.json')


def save_blob(stem: Path, array: np.ndarray, dtype: str = 'f32') -> Path:
    """
    Sauvegarde un tenseur : données little-endian ordre C + en-tête JSON {"shape", "dtype"}.

    Args:
        stem: Chemin sans extension
        array: Tableau réel
        dtype: 'f32' ou 'f64'

    Returns:
        Chemin du fichier de données
    """
    if dtype not in BLOB_DTYPES:
        raise ValueError(f"Type de blob inconnu : {dtype}")
    bin_path, json_path = blob_paths(stem)
    data = np.ascontiguousarray(array, dtype=BLOB_DTYPES[dtype])
    atomic_write_bytes(bin_path, data.tobytes(order='C'))
    write_json(json_path, {'shape': list(data.shape), 'dtype': dtype})
    return bin_path


def load_blob(stem: Path) -> np.ndarray:
    """
    Charge un tenseur sauvegardé par `save_blob`.

    Raises:
        IntegrityError: fichier manquant ou taille incohérente avec l'en-tête
    """
    bin_path, json_path = blob_paths(stem)
    if not bin_path.exists() or not json_path.exists():
        raise IntegrityError(f"Blob manquant : {bin_path.name if not bin_path.exists() else json_path.name}")
    header = read_json(json_path)
    dtype = header.get('dtype')
    if dtype not in BLOB_DTYPES:
        raise IntegrityError(f"Type inconnu dans {json_path.name} : {dtype}")
    shape = tuple(int(n) for n in header['shape'])
    raw = bin_path.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(BLOB_DTYPES[dtype]).itemsize
    if len(raw) != expected:
        raise IntegrityError(f"{bin_path.name} : {len(raw)} octets, {expected} attendus pour la forme {shape}")
    return np.frombuffer(raw, dtype=BLOB_DTYPES[dtype]).reshape(shape).copy()


def write_epoch_file(stem: Path, samples: np.ndarray, header: Dict[str, Any]) -> Path:
    """
    Écrit une époque : en-tête JSON + charge utile f32 little-endian, canal par canal.

    Args:
        stem: Chemin sans extension
        samples: Matrice T×C (microvolts)
        header: {"fs", "channels", "subject", "label"} ; "samples" est ajouté

    Returns:
        Chemin du fichier de données
    """
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[1] != len(header['channels']):
        raise ValueError(f"Époque {samples.shape} incompatible avec {len(header['channels'])} canaux")
    bin_path, json_path = blob_paths(stem)
    payload = np.ascontiguousarray(samples.T, dtype='<f4')
    atomic_write_bytes(bin_path, payload.tobytes(order='C'))
    write_json(json_path, {**header, 'samples': int(samples.shape[0])})
    return bin_path


def read_epoch_file(stem: Path) -> Tuple[Dict[str, Any], np.ndarray]:
    """
    Lit une époque écrite par `write_epoch_file`.

    Returns:
        (en-tête, matrice T×C)
    """
    bin_path, json_path = blob_paths(stem)
    if not bin_path.exists() or not json_path.exists():
        raise IntegrityError(f"Époque incomplète : {Path(stem).name}")
    header = read_json(json_path)
    t, c = int(header['samples']), len(header['channels'])
    raw = bin_path.read_bytes()
    if len(raw) != 4 * t * c:
        raise IntegrityError(f"{bin_path.name} : {len(raw)} octets, {4 * t * c} attendus")
    samples = np.frombuffer(raw, dtype='<f4').reshape(c, t).T.copy()
    return header, samples
