"""Tests pour le module wavelets."""

import logging
import math

import numpy as np
import pytest
from scipy import integrate

from numerics import ShapeError
from wavelets import (
    MOTHERS, MorletParams, _cached_bank, build_filter_bank, cwt_1d, frequency_grid, load_filter_bank,
    morlet_feature_map, morlet_lipschitz_constant, save_filter_bank, scales_for,
)

FS = 250.0


class TestFilterBank:
    """Tests pour build_filter_bank."""

    def test_cardinality(self):
        """Test J=1, L=1 : un passe-bande et un passe-bas."""
        bank = build_filter_bank(1, 1, 32)

        assert len(bank.psi_hat) == 1
        assert bank.phi_hat.shape == (32, 32)

    @pytest.mark.parametrize("J,L,size", [(1, 1, 32), (2, 4, 32), (3, 8, 64), (2, 4, (32, 64))])
    def test_zero_mean(self, J, L, size):
        """Test que chaque passe-bande est de moyenne nulle."""
        bank = build_filter_bank(J, L, size)

        assert len(bank.psi_hat) == J * L
        for _, _, psi in bank.filters():
            assert abs(psi[0, 0]) < 1e-6

    @pytest.mark.parametrize("J,L,size", [
        (1, 4, 16), (2, 4, 32), (2, 4, 64), (2, 8, 64), (3, 8, 64), (3, 8, 128), (2, 4, (32, 64)),
    ])
    def test_littlewood_paley_bounds(self, J, L, size):
        """Test la somme de Littlewood–Paley sur les fréquences non nulles du disque de Nyquist."""
        bank = build_filter_bank(J, L, size)
        h, w = bank.size
        lp = bank.littlewood_paley()
        wy, wx = np.meshgrid(2 * np.pi * np.fft.fftfreq(h), 2 * np.pi * np.fft.fftfreq(w), indexing='ij')
        radius = np.hypot(wy, wx)
        inside = (radius > 0) & (radius <= np.pi)

        assert lp[inside].min() >= 0.5
        assert lp.max() <= 1.0 + 1e-9
        assert bank.lp_min == pytest.approx(lp[inside].min())

    def test_single_orientation_warns(self, caplog):
        """Test qu'un banc à une orientation signale sa borne basse non atteinte sans échouer."""
        _cached_bank.cache_clear()
        with caplog.at_level(logging.WARNING, logger='wavelets'):
            bank = build_filter_bank(1, 1, 16)

        assert bank.lp_min < 0.5
        assert bank.lp_max <= 1.0 + 1e-9
        assert "Littlewood-Paley minimal" in caplog.text

    def test_rotation_preserves_norm(self):
        """Test que la norme des filtres ne dépend pas de l'orientation."""
        bank = build_filter_bank(3, 8, 64)
        for j in range(1, 4):
            norms = np.array([np.linalg.norm(bank.psi_hat[(j, t)]) for t in range(8)])
            assert (norms.max() - norms.min()) / norms.mean() < 1e-3

    def test_lowpass_is_band_limited(self):
        """Test que le passe-bas est nul hors du disque |ω| < π/2^J."""
        bank = build_filter_bank(2, 4, 32)
        wy, wx = np.meshgrid(2 * np.pi * np.fft.fftfreq(32), 2 * np.pi * np.fft.fftfreq(32), indexing='ij')

        assert np.all(bank.phi_hat[np.hypot(wy, wx) >= np.pi / 4] == 0)
        assert bank.phi_hat[0, 0] == pytest.approx(1.0)

    def test_j_too_large(self):
        """Test qu'un J trop grand pour la grille est refusé."""
        with pytest.raises(ValueError, match="trop grand"):
            build_filter_bank(5, 4, 32)

    def test_non_power_of_two(self):
        """Test qu'une grille non puissance de deux est refusée."""
        with pytest.raises(ShapeError):
            build_filter_bank(1, 4, 24)

    def test_bank_is_cached_and_read_only(self):
        """Test le partage du banc et l'immutabilité des filtres."""
        a = build_filter_bank(2, 4, 32)
        b = build_filter_bank(2, 4, (32, 32))

        assert a is b
        with pytest.raises(ValueError):
            a.phi_hat[0, 0] = 2.0

    def test_save_and_load(self, temp_dir):
        """Test la sauvegarde du banc en blobs + manifeste."""
        bank = build_filter_bank(2, 4, 32)
        save_filter_bank(bank, temp_dir)
        loaded = load_filter_bank(temp_dir)

        assert (loaded.J, loaded.L, loaded.size) == (2, 4, (32, 32))
        assert loaded.lp_min == bank.lp_min
        for key, psi in bank.psi_hat.items():
            np.testing.assert_array_equal(loaded.psi_hat[key], psi)


class TestCwt:
    """Tests pour cwt_1d."""

    def _time(self, seconds=4.0):
        return np.arange(int(seconds * FS)) / FS

    def test_zero_signal(self):
        """Test qu'un signal nul donne des coefficients nuls."""
        result = cwt_1d(np.zeros(1000), 'morlet', scales_for('morlet', frequency_grid()), 1 / FS)

        assert result.coefficients.shape == (32, 1000)
        assert np.all(result.coefficients == 0)

    def test_sinusoid_peak_scale(self):
        """Test que la puissance maximale est à l'échelle de Morlet associée à 10 Hz."""
        t = self._time()
        scales = scales_for('morlet', frequency_grid())
        result = cwt_1d(np.sin(2 * np.pi * 10 * t), 'morlet', scales, 1 / FS)
        power = np.mean(np.abs(result.coefficients) ** 2, axis=1)
        expected_scale = (6 + math.sqrt(2 + 36)) / (4 * math.pi * 10)
        expected_row = int(np.argmin(np.abs(np.log(scales) - math.log(expected_scale))))

        assert abs(int(np.argmax(power)) - expected_row) <= 1

    @pytest.mark.parametrize("wavelet", ['morlet', 'paul', 'dog'])
    def test_constant_signal_is_rejected(self, wavelet):
        """Test que la composante continue est éliminée."""
        signal = np.full(1000, 5.0)
        result = cwt_1d(signal, wavelet, scales_for(wavelet, frequency_grid()), 1 / FS)

        assert np.max(np.abs(result.coefficients)) < 1e-4 * np.linalg.norm(signal)

    @pytest.mark.parametrize("wavelet", ['morlet', 'paul', 'dog'])
    def test_shift_equivariance(self, rng, wavelet):
        """Test qu'un décalage circulaire décale les coefficients."""
        x = rng.standard_normal(256)
        scales = scales_for(wavelet, frequency_grid(2.0, 60.0, 8))
        base = cwt_1d(x, wavelet, scales, 1 / FS).coefficients
        moved = cwt_1d(np.roll(x, 7), wavelet, scales, 1 / FS).coefficients

        np.testing.assert_allclose(moved, np.roll(base, 7, axis=1), atol=1e-9)

    def test_mothers_have_zero_mean(self):
        """Test que chaque ondelette mère a une moyenne nulle."""
        for mother in MOTHERS.values():
            assert abs(mother.spectrum(np.array([0.0]))[0]) < 1e-6

    def test_scale_beyond_duration_flagged(self):
        """Test qu'une échelle plus longue que le signal est marquée invalide."""
        result = cwt_1d(np.ones(100), 'morlet', [0.1, 10.0], 1 / FS)

        assert result.valid.tolist() == [True, False]

    def test_short_signal_rejected(self):
        """Test qu'un signal trop court est refusé."""
        with pytest.raises(ValueError):
            cwt_1d(np.ones(8), 'morlet', [0.1], 1 / FS)

    def test_negative_scale_rejected(self):
        """Test que les échelles négatives sont refusées."""
        with pytest.raises(ValueError):
            cwt_1d(np.ones(64), 'dog', [-1.0], 1 / FS)

    def test_rows_ordered_high_to_low(self):
        """Test que la ligne 0 correspond à la plus haute fréquence."""
        freqs = frequency_grid()
        assert freqs[0] == pytest.approx(70.0) and freqs[-1] == pytest.approx(0.5)


class TestMorletLipschitz:
    """Tests pour morlet_lipschitz_constant."""

    def test_contractive_example(self):
        """Test C1=0.1, ξ=2, C2=0.5, σ=1 → 0.5."""
        bound = morlet_lipschitz_constant(MorletParams(C1=0.1, xi=2.0, C2=0.5, sigma=1.0))

        assert bound.value == pytest.approx(0.5)
        assert bound.contractive

    def test_non_contractive_example(self):
        """Test C1=1, ξ=2, C2=1, σ=1 → 6."""
        bound = morlet_lipschitz_constant(MorletParams(C1=1.0, xi=2.0, C2=1.0, sigma=1.0))

        assert bound.value == pytest.approx(6.0)
        assert not bound.contractive

    def test_empirical_ratio_below_bound(self, rng):
        """Test que le rapport empirique reste sous la borne sur 1000 paires."""
        params = MorletParams(C1=0.1, xi=2.0, C2=0.5, sigma=1.0)
        bound = morlet_lipschitz_constant(params).value
        u = rng.uniform(-1, 1, (1000, 1))
        v = rng.uniform(-1, 1, (1000, 1))
        keep = np.abs(u - v)[:, 0] > 1e-6
        ratio = np.abs(morlet_feature_map(u, params) - morlet_feature_map(v, params))[keep] / np.abs(u - v)[keep, 0]

        assert ratio.max() <= bound

    def test_admissible_params_zero_mean(self):
        """Test que C2 admissible annule la moyenne de l'ondelette 1-D."""
        params = MorletParams.admissible(C1=1.0, xi=5.0, sigma=1.0)
        u = np.linspace(-12, 12, 24001)
        psi = (np.exp(1j * params.xi * u) - params.C2) * np.exp(-u ** 2 / (2 * params.sigma ** 2))

        assert abs(integrate.trapezoid(psi, u)) < 1e-6 * np.max(np.abs(psi))
