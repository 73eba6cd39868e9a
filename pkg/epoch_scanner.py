"""Module pour scanner un répertoire de corpus et trouver les fichiers d'époques EEG."""

import logging
from pathlib import Path
from typing import Dict, List

from encoder import EegEpoch, read_epoch
from file_operations import blob_paths, read_json
from parallel_processor import process_parallel, raise_on_failure

logger = logging.getLogger(__name__)

# Clés qui distinguent un en-tête d'époque d'un en-tête de blob ou d'un manifeste
EPOCH_HEADER_KEYS = {'fs', 'channels', 'subject', 'label', 'samples'}


def _is_epoch_header(json_path: Path) -> bool:
    try:
        header = read_json(json_path)
    except (OSError, ValueError):
        return False
    return isinstance(header, dict) and EPOCH_HEADER_KEYS <= header.keys()


def scan_epochs(directory: str) -> List[Path]:
    """
    Scanne un répertoire (récursivement) et retourne les époques complètes.

    Une époque est une paire `<nom>.json` (en-tête d'époque) + `<nom>.bin`.
    Un en-tête sans données est signalé et ignoré.

    Args:
        directory: Chemin du répertoire à scanner

    Returns:
        Chemins (sans extension) des époques trouvées, triés
    """
    dir_path = Path(directory)

    if not dir_path.exists():
        raise FileNotFoundError(f"Le répertoire {directory} n'existe pas")

    if not dir_path.is_dir():
        raise NotADirectoryError(f"{directory} n'est pas un répertoire")

    stems = []
    for json_path in dir_path.rglob('*.json'):
        if not json_path.is_file() or not _is_epoch_header(json_path):
            continue
        stem = json_path.with_name(json_path.name[:-len('.json')])
        if not blob_paths(stem)[0].is_file():
            logger.warning("En-tête sans données ignoré : %s", json_path)
            continue
        stems.append(stem)

    return sorted(stems)


def load_epochs(directory: str, max_workers: int = 1) -> List[EegEpoch]:
    """Lit toutes les époques du répertoire, dans l'ordre de `scan_epochs`."""
    stems = scan_epochs(directory)
    results = process_parallel(stems, read_epoch, max_workers)
    return raise_on_failure(results, "époque")


def count_by_subject(epochs: List[EegEpoch]) -> Dict[str, Dict[str, int]]:
    """Effectifs {sujet: {'total', 'positive'}} d'un corpus."""
    counts: Dict[str, Dict[str, int]] = {}
    for epoch in epochs:
        entry = counts.setdefault(epoch.subject_id, {'total': 0, 'positive': 0})
        entry['total'] += 1
        entry['positive'] += epoch.label
    return dict(sorted(counts.items()))
