"""Tests pour la ligne de commande (run.py)."""

import json
from pathlib import Path

import pytest

from file_operations import read_json
from run import COMMANDS, EXIT_FAILURE, EXIT_OK, EXIT_USAGE, build_parser, dispatch, merged, suggest


class TestUsage:
    """Tests des erreurs d'utilisation (code 1)."""

    def test_unknown_subcommand_suggestion(self, temp_dir, capsys):
        """Test qu'une sous-commande mal orthographiée est suggérée."""
        code = dispatch(['trian', '--out-dir', temp_dir])

        assert code == EXIT_USAGE
        assert "« train »" in capsys.readouterr().err

    def test_unknown_flag_suggestion(self, temp_dir, capsys):
        """Test qu'une option inconnue donne une suggestion."""
        code = dispatch(['train', '--out-dir', temp_dir, '--data', temp_dir, '--sed', '7'])

        assert code == EXIT_USAGE
        assert "« --seed »" in capsys.readouterr().err

    def test_missing_subcommand(self, capsys):
        """Test qu'une sous-commande est requise."""
        assert dispatch([]) == EXIT_USAGE
        assert "gen-data" in capsys.readouterr().err

    def test_missing_config_file(self, temp_dir):
        """Test qu'un fichier de configuration absent est une erreur d'utilisation."""
        code = dispatch(['bound', '--out-dir', temp_dir, '--config', str(Path(temp_dir) / 'absent.json')])

        assert code == EXIT_USAGE

    def test_invalid_config_values(self, temp_dir):
        """Test qu'une configuration invalide donne le code 1 et un manifeste."""
        config = Path(temp_dir) / 'config.json'
        config.write_text(json.dumps({'synth': {'seizure_fraction': 2.0}}))
        out = Path(temp_dir) / 'out'

        code = dispatch(['gen-data', '--out-dir', str(out), '--config', str(config)])

        assert code == EXIT_USAGE
        assert read_json(out / 'manifest.json')['status'] == 'usage_error'

    def test_threads_must_be_positive(self, temp_dir):
        """Test que --threads doit être au moins 1."""
        assert dispatch(['bench', '--out-dir', temp_dir, '--threads', '0']) == EXIT_USAGE

    @pytest.mark.parametrize("command", ['train', 'encode'])
    def test_scale_paper_accepted(self, temp_dir, command):
        """Test que --scale accepte toy et paper, et refuse toute autre valeur."""
        parser = build_parser()
        base = [command, '--out-dir', temp_dir, '--data', temp_dir]

        assert parser.parse_args(base + ['--scale', 'paper']).scale == 'paper'
        assert parser.parse_args(base).scale == 'toy'
        assert dispatch(base + ['--scale', 'full']) == EXIT_USAGE

    def test_suggest_without_match(self):
        """Test qu'aucune suggestion n'est faite sans candidat proche."""
        message = suggest(['zzzzzz'], build_parser(), "invalid choice")
        assert message == "Sous-commande inconnue : zzzzzz"

    def test_all_commands_registered(self):
        """Test que chaque sous-commande est connue de l'analyseur."""
        assert set(build_parser().subcommands) == set(COMMANDS)


class TestConfig:
    """Tests de la fusion configuration + options."""

    def test_flags_override_file(self):
        """Test que les options explicites l'emportent sur le fichier."""
        config = {'train': {'epochs_max': 5, 'seed': 1}}
        assert merged(config, 'train', seed=7, folds=None) == {'epochs_max': 5, 'seed': 7}

    def test_missing_section(self):
        """Test qu'une section absente donne les seules options."""
        assert merged({}, 'model', variant='Proto') == {'variant': 'Proto'}


class TestCommands:
    """Tests des sous-commandes rapides."""

    def test_bench_scatter(self, temp_dir):
        """Test que bench écrit les statistiques de temps sur 20 répétitions."""
        out = Path(temp_dir)

        code = dispatch(['bench', '--out-dir', temp_dir, '--J', '3', '--L', '8', '--size', '64'])

        assert code == EXIT_OK
        bench = read_json(out / 'bench.json')
        assert bench['repeats'] == 20
        assert set(bench['wall_time']) == {'mean_ms', 'median_ms', 'min_ms', 'max_ms', 'std_ms'}
        manifest = read_json(out / 'manifest.json')
        assert manifest['status'] == 'ok'
        assert manifest['outputs'] == ['bench.json']
        assert manifest['command'] == 'bench'

    def test_bound_contractive(self, temp_dir):
        """Test que bound vérifie les deux régimes pour une constante de 0,5."""
        code = dispatch(['bound', '--out-dir', temp_dir, '--constant', '0.5', '--trials', '200',
                         '--datasets', '3', '--fourier-trials', '50'])

        assert code == EXIT_OK
        report = read_json(Path(temp_dir) / 'bound.json')
        assert report['constant'] == pytest.approx(0.5)
        assert report['holds'] is True
        assert len(report['bound_before']) == 3
        assert report['fourier'] == {'trials': 50, 'holds': 50, 'all_hold': True}

    def test_bound_deterministic(self, temp_dir):
        """Test que deux exécutions de même graine donnent le même rapport."""
        outputs = []
        for name in ('a', 'b'):
            out = Path(temp_dir) / name
            dispatch(['bound', '--out-dir', str(out), '--seed', '3', '--trials', '100',
                      '--datasets', '2', '--fourier-trials', '10'])
            outputs.append((out / 'bound.json').read_bytes())

        assert outputs[0] == outputs[1]

    def test_scatter_texture(self, temp_dir):
        """Test que scatter écrit coefficients et énergies d'une texture."""
        out = Path(temp_dir)

        code = dispatch(['scatter', '--out-dir', temp_dir, '--J', '2', '--L', '4', '--size', '32'])

        assert code == EXIT_OK
        report = read_json(out / 'scatter.json')
        assert report['energy_ratio'] <= 1 + 1e-6
        assert len(report['paths']['order1']) == 8
        assert (out / 'order2.bin').exists()

    def test_scatter_energy_report_keys(self, temp_dir):
        """Test le rapport d'énergie nommé par ordre (E0, E1, E2) et les bornes de Littlewood–Paley."""
        out = Path(temp_dir)

        assert dispatch(['scatter', '--out-dir', temp_dir, '--J', '3', '--L', '8', '--size', '64']) == EXIT_OK

        report = read_json(out / 'scatter.json')
        assert {'E0', 'E1', 'E2', 'input_energy'} <= set(report)
        assert [report['E0'], report['E1'], report['E2']] == pytest.approx(report['energy_by_order'])
        assert report['E0'] + report['E1'] + report['E2'] <= report['input_energy'] * (1 + 1e-6)
        assert report['lp_bounds'][0] >= 0.5
        assert report['lp_bounds'][1] <= 1 + 1e-9

    def test_scatter_order_one_has_zero_e2(self, temp_dir):
        """Test qu'à l'ordre 1 l'énergie d'ordre 2 est nulle."""
        assert dispatch(['scatter', '--out-dir', temp_dir, '--J', '2', '--L', '4', '--size', '32',
                         '--order', '1']) == EXIT_OK

        assert read_json(Path(temp_dir) / 'scatter.json')['E2'] == 0.0

    def test_encode_missing_directory(self, temp_dir):
        """Test qu'un répertoire d'époques absent donne un échec d'exécution."""
        out = Path(temp_dir) / 'out'

        code = dispatch(['encode', '--out-dir', str(out), '--data', str(Path(temp_dir) / 'absent')])

        assert code == EXIT_FAILURE
        manifest = read_json(out / 'manifest.json')
        assert manifest['status'] == 'failed'
        assert "n'existe pas" in manifest['error']

    def test_gen_data(self, temp_dir):
        """Test que gen-data écrit le corpus et son manifeste."""
        out = Path(temp_dir)

        code = dispatch(['gen-data', '--out-dir', temp_dir, '--n-subjects', '2', '--epochs-per-subject', '2',
                         '--seed', '5', '--threads', '2'])

        assert code == EXIT_OK
        index = read_json(out / 'epochs' / 'corpus.json')
        assert len(index['epochs']) == 4
        manifest = read_json(out / 'manifest.json')
        assert manifest['config']['synth']['seed'] == 5
        assert manifest['seed'] == 5
