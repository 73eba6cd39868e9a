"""Module pour exécuter des tâches indépendantes (sujets, époques, images) en parallèle."""

from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Any, Callable, Generic, List, Optional, Sequence, TypeVar

T = TypeVar('T')
R = TypeVar('R')


@dataclass
class TaskResult(Generic[T, R]):
    """Résultat du traitement d'un élément."""
    item: T
    index: int
    value: Optional[R]
    success: bool
    error: str = ""


def process_parallel(
    items: Sequence[T],
    processing_function: Callable[[T], R],
    max_workers: int = 4,
    progress_callback: Callable[[int, int], None] = None
) -> List[TaskResult]:
    """
    Traite plusieurs éléments en parallèle.

    Les échecs sont consignés dans le résultat au lieu d'interrompre le lot.
    Les résultats sont rendus dans l'ordre des éléments, quel que soit
    l'ordre de terminaison, pour que `max_workers` n'influe pas sur la sortie.

    Args:
        items: Éléments à traiter
        processing_function: Fonction appliquée à chaque élément
        max_workers: Nombre maximum de workers en parallèle
        progress_callback: Fonction optionnelle appelée avec (complété, total) pour la progression

    Returns:
        Liste des résultats, dans l'ordre de `items`
    """
    if max_workers < 1:
        raise ValueError(f"max_workers doit être ≥ 1 (reçu {max_workers})")
    results: List[Any] = [None] * len(items)
    total = len(items)
    completed = 0

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        # Soumettre toutes les tâches
        future_to_index = {
            executor.submit(processing_function, item): i
            for i, item in enumerate(items)
        }

        # Collecter les résultats au fur et à mesure
        for future in as_completed(future_to_index):
            i = future_to_index[future]
            completed += 1

            try:
                results[i] = TaskResult(item=items[i], index=i, value=future.result(), success=True)
            except Exception as e:
                results[i] = TaskResult(item=items[i], index=i, value=None, success=False, error=str(e))

            # Appeler le callback de progression si fourni
            if progress_callback:
                progress_callback(completed, total)

    return results


def raise_on_failure(results: Sequence[TaskResult], what: str = "tâche") -> List[Any]:
    """
    Valeurs des résultats, ou RuntimeError listant les éléments en échec.
    """
    failed = [r for r in results if not r.success]
    if failed:
        details = "; ".join(f"{r.item}: {r.error}" for r in failed[:3])
        raise RuntimeError(f"{len(failed)} {what}(s) en échec : {details}")
    return [r.value for r in results]
