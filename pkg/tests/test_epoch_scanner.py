"""Tests pour le module epoch_scanner."""

from pathlib import Path

import numpy as np
import pytest

from encoder import STANDARD_ELECTRODES, EegEpoch, write_epoch
from epoch_scanner import count_by_subject, load_epochs, scan_epochs
from file_operations import save_blob, write_json


def make_epoch(subject='sub00', label=0, seed=0):
    samples = np.random.default_rng(seed).standard_normal((250, len(STANDARD_ELECTRODES)))
    return EegEpoch(samples, 250.0, subject, label, list(STANDARD_ELECTRODES))


class TestScanEpochs:
    """Tests pour la fonction scan_epochs."""

    def test_scan_epochs_empty_directory(self, temp_dir):
        """Test le scan d'un répertoire vide."""
        assert scan_epochs(temp_dir) == []

    def test_scan_epochs_nonexistent_directory(self):
        """Test le scan d'un répertoire inexistant."""
        with pytest.raises(FileNotFoundError):
            scan_epochs("/chemin/inexistant/vers/repertoire")

    def test_scan_epochs_file_not_directory(self, temp_dir):
        """Test le scan d'un fichier au lieu d'un répertoire."""
        file_path = Path(temp_dir) / "fichier.txt"
        file_path.write_text("contenu")

        with pytest.raises(NotADirectoryError):
            scan_epochs(str(file_path))

    def test_scan_epochs_sorted_and_recursive(self, temp_dir):
        """Test que les époques des sous-répertoires sont trouvées et triées."""
        root = Path(temp_dir)
        write_epoch(make_epoch('sub01'), root / 'b' / 'sub01_e000')
        write_epoch(make_epoch('sub00'), root / 'a' / 'sub00_e001')
        write_epoch(make_epoch('sub00'), root / 'a' / 'sub00_e000')

        stems = scan_epochs(temp_dir)

        assert [s.name for s in stems] == ['sub00_e000', 'sub00_e001', 'sub01_e000']
        assert stems == sorted(stems)

    def test_scan_epochs_ignores_other_json(self, temp_dir):
        """Test que manifestes, index et blobs de tenseurs sont ignorés."""
        root = Path(temp_dir)
        write_epoch(make_epoch(), root / 'sub00_e000')
        write_json(root / 'corpus.json', {'epochs': []})
        save_blob(root / 'weights', np.ones(3))
        (root / 'notes.json').write_text("pas du json {")

        assert [s.name for s in scan_epochs(temp_dir)] == ['sub00_e000']

    def test_scan_epochs_skips_header_without_data(self, temp_dir):
        """Test qu'un en-tête sans fichier de données est ignoré."""
        root = Path(temp_dir)
        write_epoch(make_epoch(), root / 'sub00_e000')
        write_epoch(make_epoch(), root / 'sub00_e001')
        (root / 'sub00_e001.bin').unlink()

        assert [s.name for s in scan_epochs(temp_dir)] == ['sub00_e000']


class TestLoadEpochs:
    """Tests pour load_epochs et count_by_subject."""

    def test_load_and_count(self, temp_dir):
        """Test la lecture d'un corpus et le décompte par sujet."""
        root = Path(temp_dir)
        for k, (subject, label) in enumerate([('sub00', 0), ('sub00', 1), ('sub01', 1)]):
            write_epoch(make_epoch(subject, label, seed=k), root / f'{subject}_e{k:03d}')

        epochs = load_epochs(temp_dir, max_workers=2)

        assert [e.subject_id for e in epochs] == ['sub00', 'sub00', 'sub01']
        assert epochs[0].samples.shape == (250, 19)
        assert count_by_subject(epochs) == {
            'sub00': {'total': 2, 'positive': 1},
            'sub01': {'total': 1, 'positive': 1},
        }

    def test_load_truncated_epoch_fails(self, temp_dir):
        """Test qu'une époque tronquée fait échouer la lecture."""
        root = Path(temp_dir)
        write_epoch(make_epoch(), root / 'sub00_e000')
        data = root / 'sub00_e000.bin'
        data.write_bytes(data.read_bytes()[:100])

        with pytest.raises(RuntimeError, match="époque"):
            load_epochs(temp_dir)
