"""Tests pour le module parallel_processor."""

import random
import time

import pytest

from parallel_processor import TaskResult, process_parallel, raise_on_failure


class TestTaskResult:
    """Tests pour la classe TaskResult."""

    def test_task_result_success(self):
        """Test la création d'un résultat réussi."""
        result = TaskResult(item="sub00", index=0, value=[1, 2], success=True)

        assert result.item == "sub00"
        assert result.value == [1, 2]
        assert result.success is True
        assert result.error == ""

    def test_task_result_failure(self):
        """Test la création d'un résultat échoué."""
        result = TaskResult(item="sub01", index=3, value=None, success=False, error="Erreur de test")

        assert result.index == 3
        assert result.value is None
        assert result.success is False
        assert result.error == "Erreur de test"


class TestProcessParallel:
    """Tests pour la fonction process_parallel."""

    def square(self, n: int):
        """Fonction de traitement factice pour les tests."""
        return n * n

    def slow_function(self, n: int):
        """Fonction de traitement lente pour tester le parallélisme."""
        time.sleep(0.1)
        return n

    def jittery_function(self, n: int):
        """Fonction dont la durée varie pour mélanger l'ordre de terminaison."""
        time.sleep(random.uniform(0, 0.02))
        return n

    def failing_function(self, n: int):
        """Fonction de traitement qui échoue."""
        raise ValueError("Erreur de traitement intentionnelle")

    def test_process_single_item(self):
        """Test le traitement d'un seul élément."""
        results = process_parallel([3], self.square, max_workers=1)

        assert len(results) == 1
        assert results[0].success is True
        assert results[0].value == 9
        assert results[0].index == 0

    def test_process_empty_list(self):
        """Test le traitement d'une liste vide."""
        assert process_parallel([], self.square, max_workers=2) == []

    def test_results_in_input_order(self):
        """Test que les résultats suivent l'ordre des éléments quelle que soit la terminaison."""
        items = list(range(20))

        results = process_parallel(items, self.jittery_function, max_workers=8)

        assert [r.value for r in results] == items
        assert [r.index for r in results] == items

    def test_worker_count_does_not_change_output(self):
        """Test que le nombre de workers n'influe pas sur la sortie."""
        items = list(range(10))

        values = [
            [r.value for r in process_parallel(items, self.square, max_workers=w)]
            for w in (1, 4, 8)
        ]

        assert values[0] == values[1] == values[2]

    def test_invalid_worker_count(self):
        """Test qu'un nombre de workers nul est refusé."""
        with pytest.raises(ValueError, match="max_workers"):
            process_parallel([1], self.square, max_workers=0)

    def test_process_with_errors(self):
        """Test le traitement quand tous les éléments échouent."""
        results = process_parallel([1, 2, 3], self.failing_function, max_workers=2)

        assert len(results) == 3
        assert all(not r.success for r in results)
        assert all("Erreur de traitement intentionnelle" in r.error for r in results)

    def test_process_with_mixed_success_failure(self):
        """Test le traitement avec un mélange de succès et d'échecs."""
        def mixed_function(n: int):
            # Faire échouer les éléments pairs
            if n % 2 == 0:
                raise ValueError("Échec pour élément pair")
            return n

        results = process_parallel(list(range(5)), mixed_function, max_workers=2)

        assert [r.success for r in results] == [False, True, False, True, False]

    def test_process_with_progress_callback(self):
        """Test le callback de progression."""
        progress_calls = []

        def progress_callback(completed, total):
            progress_calls.append((completed, total))

        process_parallel(list(range(5)), self.square, max_workers=2, progress_callback=progress_callback)

        assert len(progress_calls) == 5
        assert all(total == 5 for completed, total in progress_calls)
        assert sorted(completed for completed, total in progress_calls) == [1, 2, 3, 4, 5]

    @pytest.mark.slow
    def test_parallel_processing_is_faster(self):
        """Test que le traitement parallèle est plus rapide."""
        items = list(range(4))

        start_time = time.time()
        process_parallel(items, self.slow_function, max_workers=1)
        sequential_time = time.time() - start_time

        start_time = time.time()
        process_parallel(items, self.slow_function, max_workers=4)
        parallel_time = time.time() - start_time

        assert parallel_time < sequential_time * 0.8


class TestRaiseOnFailure:
    """Tests pour raise_on_failure."""

    def test_values_when_all_succeed(self):
        """Test que les valeurs sont rendues dans l'ordre."""
        results = process_parallel([1, 2, 3], lambda n: n * 10, max_workers=2)

        assert raise_on_failure(results) == [10, 20, 30]

    def test_failure_raises(self):
        """Test qu'un échec lève une erreur qui nomme l'élément."""
        def picky(n: int):
            if n == 2:
                raise RuntimeError("Message d'erreur spécifique")
            return n

        results = process_parallel([1, 2, 3], picky, max_workers=1)

        with pytest.raises(RuntimeError, match="1 sujet\\(s\\) en échec : 2: Message d'erreur spécifique"):
            raise_on_failure(results, "sujet")
