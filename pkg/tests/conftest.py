"""Fixtures partagées pour les tests."""

import shutil
import tempfile

import numpy as np
import pytest

import numerics


@pytest.fixture
def f64():
    """Bascule en double précision le temps d'un test."""
    with numerics.precision('f64'):
        yield


@pytest.fixture
def rng():
    """Générateur aléatoire à graine fixe."""
    return np.random.default_rng(1234)


@pytest.fixture
def temp_dir():
    """Crée un répertoire temporaire pour les tests."""
    temp_path = tempfile.mkdtemp()
    yield temp_path
    shutil.rmtree(temp_path)
