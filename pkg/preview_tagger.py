"""Module pour écrire des aperçus JPEG des images multispectrales, étiquetés en EXIF."""

import logging
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from encoder import MultispectralImage
from file_operations import build_output_name

try:
    from PIL import Image
    import piexif
    EXIF_AVAILABLE = True
except ImportError:
    EXIF_AVAILABLE = False

logger = logging.getLogger(__name__)

XP_KEYWORDS = 0x9c9e
TAG_SEPARATOR = "; "


def epoch_tags(subject_id: str, label: int, extra: Sequence[str] = ()) -> List[str]:
    """Tags d'une époque : sujet, étiquette, puis tags libres."""
    return [f"subject={subject_id}", f"label={int(label)}", *extra]


def parse_tags(tags: Sequence[str]) -> Dict[str, str]:
    """Tags de la forme clé=valeur en dictionnaire ; les autres sont ignorés."""
    pairs = (tag.split('=', 1) for tag in tags if '=' in tag)
    return {key.strip(): value.strip() for key, value in pairs}


def preview_name(stem: Path, subject_id: str, label: int) -> str:
    """Nom de l'aperçu : {époque}_{sujet}_{label}.jpg"""
    return build_output_name(Path(stem), [subject_id, f"label{int(label)}"], '.jpg')


def to_rgb(image: MultispectralImage) -> np.ndarray:
    """
    Plans 0, 1, 2 sur les canaux R, G, B, chacun ramené à [0, 255]
    par son propre min/max. Un plan constant devient noir.
    """
    planes = []
    for plane in image.pixels.astype(np.float64):
        low, high = float(plane.min()), float(plane.max())
        span = high - low
        planes.append(np.zeros_like(plane) if span == 0 else (plane - low) / span)
    return np.round(np.stack(planes, axis=-1) * 255).astype(np.uint8)


def _exif_with_tags(exif_dict: dict, tags: List[str]) -> bytes:
    tags_string = TAG_SEPARATOR.join(tags)
    exif_dict["0th"][piexif.ImageIFD.ImageDescription] = tags_string.encode('utf-8')
    # XPKeywords attend de l'UTF-16
    exif_dict["0th"][XP_KEYWORDS] = tags_string.encode('utf-16le') + b'\x00\x00'
    return piexif.dump(exif_dict)


def add_tags_to_image(image_path: Path, tags: List[str]) -> bool:
    """
    Ajoute des tags à l'image via les champs EXIF ImageDescription et XPKeywords.

    Args:
        image_path: Chemin vers l'image
        tags: Liste de tags à ajouter

    Returns:
        True si succès, False sinon
    """
    if not EXIF_AVAILABLE:
        logger.warning("Pillow et piexif ne sont pas installés : les tags EXIF ne seront pas ajoutés.")
        return False

    try:
        try:
            exif_dict = piexif.load(str(image_path))
        except Exception:
            # Pas d'EXIF existant
            exif_dict = {"0th": {}, "Exif": {}, "GPS": {}, "1st": {}}

        exif_bytes = _exif_with_tags(exif_dict, tags)
        with Image.open(image_path) as img:
            img.load()
            img.save(str(image_path), exif=exif_bytes, quality=95)
        return True

    except Exception as e:
        logger.error("Erreur lors de l'ajout des tags EXIF à %s : %s", image_path, e)
        return False


def read_tags_from_image(image_path: Path) -> List[str]:
    """
    Lit les tags d'une image (champ ImageDescription).

    Returns:
        Liste des tags trouvés, vide si l'image n'en porte pas
    """
    if not EXIF_AVAILABLE:
        return []

    try:
        exif_dict = piexif.load(str(image_path))
        desc = exif_dict.get("0th", {}).get(piexif.ImageIFD.ImageDescription)
        if desc is None:
            return []
        if isinstance(desc, bytes):
            desc = desc.decode('utf-8', errors='ignore')
        return [tag.strip() for tag in desc.split(';') if tag.strip()]

    except Exception as e:
        logger.error("Erreur lors de la lecture des tags EXIF de %s : %s", image_path, e)
        return []


def write_preview(image: MultispectralImage, path: Path, tags: List[str]) -> bool:
    """
    Écrit l'aperçu JPEG, tags compris, en une seule compression.

    Returns:
        True si l'image et ses tags ont été écrits
    """
    if not EXIF_AVAILABLE:
        logger.warning("Pillow et piexif ne sont pas installés : aperçu %s ignoré.", path)
        return False
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        exif_bytes = _exif_with_tags({"0th": {}, "Exif": {}, "GPS": {}, "1st": {}}, tags)
        Image.fromarray(to_rgb(image)).save(str(path), exif=exif_bytes, quality=95)
        return True
    except Exception as e:
        logger.error("Erreur lors de l'écriture de l'aperçu %s : %s", path, e)
        return False
