import argparse
import difflib
import logging
import re
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

import numerics
from analysis import (
    FourierFeatureParams, branch_spectrum_report, dump_features, fourier_feature_check,
    morlet_correlation_check, sample_distinct_pairs, stage_spectrum, write_spectrum_csv,
)
from encoder import EncoderConfig, encode_epoch, read_epoch
from epoch_scanner import count_by_subject, scan_epochs
from file_operations import read_json, save_blob, write_json
from model import ModelConfig, build_model, forward, load_checkpoint
from parallel_processor import process_parallel
from preview_tagger import epoch_tags, preview_name, write_preview
from scattering import scattering_transform
from synthdata import SynthSpec, class_separability_audit, generate_corpus, generate_epochs, heterogeneity_audit
from training import ImageDataset, TrainConfig, evaluate_checkpoint, train_loop
from wavelets import MorletParams, build_filter_bank, morlet_lipschitz_constant

logger = logging.getLogger('choucroute_spectrale')

VERSION = "0.1.0"
COMMANDS = ('gen-data', 'encode', 'scatter', 'train', 'eval', 'spectrum', 'bound', 'bench')
EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    """Sous-commande, option ou configuration invalide (code de sortie 1)."""


class CliParser(argparse.ArgumentParser):
    """argparse qui lève UsageError au lieu de quitter le processus."""

    def error(self, message):
        raise UsageError(message)


@dataclass
class RunManifest:
    """Trace d'une exécution : de quoi la rejouer à l'identique."""
    command: str
    config: Dict[str, Any]
    seed: int
    version: str = VERSION
    status: str = "running"
    error: str = ""
    outputs: List[str] = field(default_factory=list)
    wall_clock: Dict[str, Any] = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / 'manifest.json'
        write_json(path, asdict(self))
        return path


def print_progress(completed: int, total: int):
    """Affiche la progression du traitement."""
    percentage = (completed / total) * 100
    print(f"Progression: {completed}/{total} éléments traités ({percentage:.1f}%)")


def print_banner(title: str, params: Dict[str, Any]):
    print("=" * 60)
    print(f"CHOUCROUTE-SPECTRALE - {title}")
    print("=" * 60)
    for key, value in params.items():
        print(f"{key}: {value}")
    print("=" * 60)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def load_config(path: Optional[str]) -> Dict[str, Any]:
    """Fichier JSON de configuration, organisé en sections (synth, encoder, model, train, morlet)."""
    if path is None:
        return {}
    try:
        config = read_json(path)
    except FileNotFoundError:
        raise UsageError(f"Fichier de configuration introuvable : {path}")
    except ValueError as e:
        raise UsageError(f"Configuration {path} illisible : {e}")
    if not isinstance(config, dict):
        raise UsageError(f"La configuration {path} doit être un objet JSON")
    return config


def merged(config: Dict[str, Any], name: str, **overrides) -> Dict[str, Any]:
    """Section `name` du fichier, les options explicites l'emportant."""
    values = dict(config.get(name, {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return values


def resolve_images(path: str) -> Path:
    """Répertoire d'images encodées, ou répertoire de sortie de `encode`."""
    root = Path(path)
    for candidate in (root, root / 'images'):
        if (candidate / 'index.json').exists():
            return candidate
    raise FileNotFoundError(f"Aucun jeu d'images encodées dans {path}")


# ---------------------------------------------------------------------------
# Sous-commandes
# ---------------------------------------------------------------------------

def cmd_gen_data(args, config: Dict[str, Any], out_dir: Path, snapshot: Dict[str, Any]) -> List[Path]:
    spec = SynthSpec(**merged(config, 'synth', seed=args.seed, n_subjects=args.n_subjects,
                              epochs_per_subject=args.epochs_per_subject))
    snapshot['synth'] = spec.model_dump(mode='json')
    print_banner("Génération du corpus synthétique", {
        "Sujets": spec.n_subjects, "Époques par sujet": spec.epochs_per_subject,
        "RSB (dB)": spec.snr_db, "Graine": spec.seed, "Sortie": out_dir,
    })

    print("\n[1/2] Génération des époques...")
    stems = generate_corpus(spec, out_dir / 'epochs', max_workers=args.threads)
    print(f"✓ {len(stems)} époque(s) écrite(s)")
    outputs = [out_dir / 'epochs']

    if args.audit:
        print("\n[2/2] Audits de séparabilité et d'hétérogénéité...")
        epochs = generate_epochs(spec, max_workers=args.threads)
        report = class_separability_audit(epochs)
        audit = {**asdict(report), 'heterogeneity': heterogeneity_audit(epochs)}
        write_json(out_dir / 'audit.json', audit)
        outputs.append(out_dir / 'audit.json')
        print(f"{'✓' if report.accepted else '✗'} {report.reason}")
    else:
        print("\n[2/2] Audits ignorés (--audit pour les lancer)")
    return outputs


def cmd_encode(args, config: Dict[str, Any], out_dir: Path, snapshot: Dict[str, Any]) -> List[Path]:
    base = EncoderConfig.toy() if args.scale == 'toy' else EncoderConfig()
    cfg = EncoderConfig(**{**base.model_dump(), **config.get('encoder', {})})
    snapshot['encoder'] = cfg.model_dump(mode='json')
    print_banner("Encodage multispectral", {
        "Époques": args.data, "Image": f"3×{cfg.height}×{cfg.width}", "Aperçus": args.preview,
        "Traitement parallèle": f"{args.threads} workers",
    })

    print("\n[1/3] Scan du répertoire d'époques...")
    stems = scan_epochs(args.data)
    print(f"✓ {len(stems)} époque(s) trouvée(s)")
    if not stems:
        raise FileNotFoundError(f"Aucune époque dans {args.data}")

    print("\n[2/3] Encodage...")

    def encode_one(stem: Path):
        epoch = read_epoch(stem)
        return epoch, encode_epoch(epoch, cfg)

    results = process_parallel(stems, encode_one, max_workers=args.threads, progress_callback=print_progress)
    failed = [r for r in results if not r.success]
    for result in failed:
        print(f"  - {result.item.name}: {result.error}")
    if failed:
        raise RuntimeError(f"Échec de l'encodage pour {len(failed)} époque(s)")

    epochs = [r.value[0] for r in results]
    images = [r.value[1] for r in results]
    data = ImageDataset(np.stack([img.pixels for img in images]), [e.label for e in epochs],
                        [e.subject_id for e in epochs], cfg.rows_per_channel)
    data.save(out_dir / 'images')
    print(f"✓ {len(data)} image(s), {len(count_by_subject(epochs))} sujet(s)")
    outputs = [out_dir / 'images']

    print("\n[3/3] Aperçus JPEG...")
    if args.preview:
        tagged = 0
        for stem, epoch, image in zip(stems, epochs, images):
            path = out_dir / 'previews' / preview_name(stem, epoch.subject_id, epoch.label)
            if write_preview(image, path, epoch_tags(epoch.subject_id, epoch.label)):
                tagged += 1
        print(f"✓ {tagged} aperçu(s) avec tags EXIF")
        outputs.append(out_dir / 'previews')
    else:
        print("Aperçus ignorés (--preview pour les écrire)")
    return outputs


def _scatter_input(args) -> np.ndarray:
    if args.data is None:
        from synthdata import texture_suite
        return texture_suite(1, seed=args.seed, size=args.size)[0]
    data = ImageDataset.load(resolve_images(args.data))
    if not 0 <= args.index < len(data):
        raise UsageError(f"Indice {args.index} hors du jeu ({len(data)} images)")
    plane = data.images[args.index, 0].astype(np.float64)
    h, w = plane.shape
    return np.pad(plane, ((0, numerics.next_power_of_two(h) - h), (0, numerics.next_power_of_two(w) - w)))


def cmd_scatter(args, config: Dict[str, Any], out_dir: Path, snapshot: Dict[str, Any]) -> List[Path]:
    snapshot['scatter'] = {'J': args.J, 'L': args.L, 'order': args.order, 'size': args.size,
                           'data': args.data, 'index': args.index}
    x = _scatter_input(args)
    print_banner("Transformée de diffusion", {"Entrée": f"{x.shape[0]}×{x.shape[1]}", "J": args.J,
                                              "L": args.L, "Ordre": args.order})
    bank = build_filter_bank(args.J, args.L, x.shape)
    coeffs = scattering_transform(x, bank, args.order)
    save_blob(out_dir / 'order0', coeffs.order0, 'f64')
    outputs = [out_dir / 'order0.bin']
    for name, maps in (('order1', coeffs.order1), ('order2', coeffs.order2)):
        if maps:
            save_blob(out_dir / name, np.stack(list(maps.values())), 'f64')
            outputs.append(out_dir / f'{name}.bin')
    energy = float(np.sum(x ** 2))
    by_order = list(coeffs.energy_by_order) + [0.0] * (3 - len(coeffs.energy_by_order))
    write_json(out_dir / 'scatter.json', {
        'input_energy': energy, 'E0': by_order[0], 'E1': by_order[1], 'E2': by_order[2],
        'energy_by_order': list(coeffs.energy_by_order),
        'energy_ratio': sum(coeffs.energy_by_order) / energy if energy > 0 else 0.0,
        'paths': {'order1': [list(map(list, p)) for p in coeffs.order1],
                  'order2': [list(map(list, p)) for p in coeffs.order2]},
        'lp_bounds': [bank.lp_min, bank.lp_max],
    })
    print(f"✓ Énergie conservée : {sum(coeffs.energy_by_order) / max(energy, 1e-300):.4f}")
    return outputs + [out_dir / 'scatter.json']


def cmd_train(args, config: Dict[str, Any], out_dir: Path, snapshot: Dict[str, Any]) -> List[Path]:
    data = ImageDataset.load(resolve_images(args.data))
    model_values = merged(config, 'model', variant=args.variant)
    if args.scale == 'paper':
        model_cfg = ModelConfig.paper(model_values.get('variant', 'ScatterFormer'))
    else:
        model_cfg = ModelConfig(**{'input_shape': tuple(data.images.shape[1:]), **model_values})
    train_cfg = TrainConfig(**merged(config, 'train', seed=args.seed, folds=args.folds, epochs_max=args.epochs,
                                     batch_size=args.batch_size, lr0=args.lr))
    snapshot['model'] = model_cfg.model_dump(mode='json')
    snapshot['train'] = train_cfg.model_dump(mode='json')
    print_banner("Entraînement par validation croisée", {
        "Variante": model_cfg.variant, "Images": f"{len(data)} × {tuple(data.images.shape[1:])}",
        "Plis": train_cfg.folds, "Époques max": train_cfg.epochs_max, "Graine": train_cfg.seed,
    })

    print("\n[1/1] Entraînement...")
    report = train_loop(model_cfg, data, train_cfg, out_dir)
    for fid, error in report.failures.items():
        print(f"✗ Pli {fid}: {error}")
    auc = report.summary['aucroc']
    print(f"✓ AUCROC médiane {auc['median']:.4f} (IQR {auc['iqr']:.4f}) sur {len(report.folds)} pli(s)")
    return [out_dir / 'metrics.jsonl', out_dir / 'summary.json'] + [out_dir / f'fold{r.fold_id}' for r in report.folds]


def cmd_eval(args, config: Dict[str, Any], out_dir: Path, snapshot: Dict[str, Any]) -> List[Path]:
    snapshot['eval'] = {'checkpoint': args.checkpoint, 'data': args.data, 'batch_size': args.batch_size}
    print_banner("Réévaluation d'un point de sauvegarde", {"Point": args.checkpoint, "Images": args.data})
    data = ImageDataset.load(resolve_images(args.data))
    result = evaluate_checkpoint(Path(args.checkpoint), data, batch_size=args.batch_size)
    write_json(out_dir / 'eval.json', result.to_dict())
    print(f"✓ AUCROC {result.aucroc:.4f}, précision {result.accuracy:.4f}")
    return [out_dir / 'eval.json']


def _analysis_model(args, input_shape):
    if args.checkpoint:
        model, _ = load_checkpoint(Path(args.checkpoint))
        return model
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([args.seed])))
    return build_model(ModelConfig(variant=args.variant or 'ScatterFormer', input_shape=input_shape), rng)


def cmd_spectrum(args, config: Dict[str, Any], out_dir: Path, snapshot: Dict[str, Any]) -> List[Path]:
    if args.data:
        batch = ImageDataset.load(resolve_images(args.data)).images[:args.count]
    else:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([args.seed, 1])))
        batch = rng.standard_normal((args.count, 3, 96, 256)).astype(np.float32)
    model = _analysis_model(args, tuple(batch.shape[1:]))
    snapshot['spectrum'] = {'variant': model.cfg.variant, 'stage': args.stage, 'count': len(batch),
                            'checkpoint': args.checkpoint, 'hf_cutoff': args.hf_cutoff}
    print_banner("Spectres des caractéristiques", {"Variante": model.cfg.variant, "Étage": args.stage,
                                                    "Images": len(batch)})
    stage = stage_spectrum(model, batch, args.stage, args.hf_cutoff)
    profiles = {'stage': stage}
    summary: Dict[str, Any] = {'variant': model.cfg.variant, 'stage': args.stage, 'stage_hf_ratio': stage.hf_ratio}
    if model.cfg.preset.mixer == 'faa':
        report = branch_spectrum_report(model, batch, args.stage, args.hf_cutoff)
        profiles.update(high=report.high, low=report.low, fused=report.fused, high_upsampled=report.high_upsampled)
        summary.update(high_hf_ratio=report.high.hf_ratio, low_hf_ratio=report.low.hf_ratio,
                       fused_hf_ratio=report.fused.hf_ratio, hf_difference=report.hf_difference,
                       high_upsampled_hf_ratio=report.high_upsampled.hf_ratio)
        print(f"✓ hf_ratio haute {report.high.hf_ratio:.4f}, basse {report.low.hf_ratio:.4f}")
    write_spectrum_csv(profiles, out_dir / 'spectrum.csv')
    write_json(out_dir / 'spectrum.json', summary)
    outputs = [out_dir / 'spectrum.csv', out_dir / 'spectrum.json']
    if args.dump_features:
        capture: Dict[str, np.ndarray] = {}
        with numerics.no_record():
            forward(model, batch, 'eval', capture)
        outputs.append(dump_features(capture, out_dir / 'features'))
    return outputs


def cmd_bound(args, config: Dict[str, Any], out_dir: Path, snapshot: Dict[str, Any]) -> List[Path]:
    params = MorletParams(**config.get('morlet', {}))
    if args.constant is not None:
        unit = morlet_lipschitz_constant(params.model_copy(update={'C1': 1.0})).value
        params = params.model_copy(update={'C1': args.constant / unit})
    snapshot['morlet'] = params.model_dump(mode='json')
    snapshot['bound'] = {'trials': args.trials, 'datasets': args.datasets, 'fourier_trials': args.fourier_trials}
    print_banner("Vérification des régimes de corrélation", {
        "Constante de Morlet": f"{morlet_lipschitz_constant(params).value:.4f}", "Essais": args.trials,
    })

    print("\n[1/2] Carte de Morlet...")
    morlet = morlet_correlation_check(params, trials=args.trials, datasets=args.datasets, seed=args.seed)
    print(f"{'✓' if morlet.holds else '✗'} constante {morlet.constant:.4f}, rapport max {morlet.max_ratio:.4f}")

    print("\n[2/2] Caractéristiques de Fourier...")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([args.seed, 3])))
    holds = 0
    for _ in range(args.fourier_trials):
        n, m, dim = int(rng.integers(1, 21)), int(rng.integers(1, 9)), int(rng.integers(2, 9))
        u, v = sample_distinct_pairs(rng, n, dim)
        holds += fourier_feature_check(FourierFeatureParams.random(rng, m, dim), u, v).holds
    print(f"✓ Inégalité vérifiée sur {holds}/{args.fourier_trials} tirages")

    write_json(out_dir / 'bound.json', {
        **morlet.to_dict(),
        'fourier': {'trials': args.fourier_trials, 'holds': holds, 'all_hold': holds == args.fourier_trials},
    })
    return [out_dir / 'bound.json']


def _timings(fn: Callable[[], Any], repeats: int) -> Dict[str, float]:
    fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1000.0)
    t = np.array(times)
    return {'mean_ms': float(t.mean()), 'median_ms': float(np.median(t)), 'min_ms': float(t.min()),
            'max_ms': float(t.max()), 'std_ms': float(t.std())}


def cmd_bench(args, config: Dict[str, Any], out_dir: Path, snapshot: Dict[str, Any]) -> List[Path]:
    snapshot['bench'] = {'target': args.target, 'J': args.J, 'L': args.L, 'size': args.size,
                         'order': args.order, 'repeats': args.repeats, 'variant': args.variant}
    print_banner("Mesure de performance", {"Cible": args.target, "Répétitions": args.repeats})
    if args.target == 'scatter':
        x = np.random.default_rng(args.seed).standard_normal((args.size, args.size))
        bank = build_filter_bank(args.J, args.L, args.size)
        stats = _timings(lambda: scattering_transform(x, bank, args.order), args.repeats)
        result = {'target': 'scatter', 'J': args.J, 'L': args.L, 'size': args.size, 'order': args.order}
    else:
        model = _analysis_model(args, (3, 96, 256))
        batch = np.random.default_rng(args.seed).standard_normal((1, 3, 96, 256))

        def run_forward():
            with numerics.no_record():
                forward(model, batch, 'eval')

        stats = _timings(run_forward, args.repeats)
        result = {'target': 'model', 'variant': model.cfg.variant, 'parameters': model.store.count()}
    write_json(out_dir / 'bench.json', {**result, 'repeats': args.repeats, 'wall_time': stats})
    print(f"✓ Médiane {stats['median_ms']:.2f} ms")
    return [out_dir / 'bench.json']


HANDLERS = {
    'gen-data': cmd_gen_data, 'encode': cmd_encode, 'scatter': cmd_scatter, 'train': cmd_train,
    'eval': cmd_eval, 'spectrum': cmd_spectrum, 'bound': cmd_bound, 'bench': cmd_bench,
}


# ---------------------------------------------------------------------------
# Analyse des arguments
# ---------------------------------------------------------------------------

def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument('--config', type=str, default=None, help='Fichier JSON de configuration (sections par module)')
    common.add_argument('--out-dir', type=str, required=True, help='Répertoire de sortie (seul répertoire écrit)')
    common.add_argument('--seed', type=int, default=0, help='Graine (défaut: 0)')
    common.add_argument('--threads', type=int, default=1, help='Nombre maximum de workers en parallèle (défaut: 1)')
    common.add_argument('--precision', choices=('f32', 'f64'), default='f32', help='Précision des tenseurs (défaut: f32)')
    common.add_argument('--verbose', action='store_true', default=False, help='Journalisation détaillée')

    parser = CliParser(
        prog='run.py',
        description='Pipeline EEG multispectral : données synthétiques, diffusion, ScatterFormer et analyses.'
    )
    sub = parser.add_subparsers(dest='command', metavar='{' + ','.join(COMMANDS) + '}')

    p = sub.add_parser('gen-data', parents=[common], help='Génère un corpus EEG synthétique')
    p.add_argument('--spec', dest='config', type=str, help='Alias de --config')
    p.add_argument('--n-subjects', type=int, default=None)
    p.add_argument('--epochs-per-subject', type=int, default=None)
    p.add_argument('--audit', action='store_true', default=False, help='Lance les audits de séparabilité')

    p = sub.add_parser('encode', parents=[common], help='Encode des époques en images multispectrales')
    p.add_argument('--data', type=str, required=True, help="Répertoire d'époques")
    p.add_argument('--scale', choices=('toy', 'paper'), default='toy')
    p.add_argument('--preview', action='store_true', default=False, help='Écrit des aperçus JPEG étiquetés')

    p = sub.add_parser('scatter', parents=[common], help='Transformée de diffusion d\'une image')
    p.add_argument('--data', type=str, default=None, help="Jeu d'images encodées (texture synthétique sinon)")
    p.add_argument('--index', type=int, default=0)
    p.add_argument('--J', type=int, default=3)
    p.add_argument('--L', type=int, default=8)
    p.add_argument('--order', type=int, choices=(0, 1, 2), default=2)
    p.add_argument('--size', type=int, default=64)

    p = sub.add_parser('train', parents=[common], help='Validation croisée par sujet')
    p.add_argument('--data', '--data-dir', dest='data', type=str, required=True, help="Jeu d'images encodées")
    p.add_argument('--variant', type=str, default=None)
    p.add_argument('--scale', choices=('toy', 'paper'), default='toy')
    p.add_argument('--folds', type=int, default=None)
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--batch-size', type=int, default=None)
    p.add_argument('--lr', type=float, default=None)

    p = sub.add_parser('eval', parents=[common], help='Réévalue un point de sauvegarde de pli')
    p.add_argument('--checkpoint', type=str, required=True)
    p.add_argument('--data', type=str, required=True)
    p.add_argument('--batch-size', type=int, default=16)

    p = sub.add_parser('spectrum', parents=[common], help='Spectres radiaux des branches d\'attention')
    p.add_argument('--checkpoint', type=str, default=None)
    p.add_argument('--variant', type=str, default=None)
    p.add_argument('--data', type=str, default=None)
    p.add_argument('--count', type=int, default=8)
    p.add_argument('--stage', type=int, default=4)
    p.add_argument('--hf-cutoff', type=float, default=0.25)
    p.add_argument('--dump-features', action='store_true', default=False)

    p = sub.add_parser('bound', parents=[common], help='Vérifie les régimes de corrélation')
    p.add_argument('--constant', type=float, default=None, help='Constante de Morlet visée (ajuste C1)')
    p.add_argument('--trials', type=int, default=1000)
    p.add_argument('--datasets', type=int, default=20)
    p.add_argument('--fourier-trials', type=int, default=1000)

    p = sub.add_parser('bench', parents=[common], help='Mesure les temps de calcul')
    p.add_argument('--target', choices=('scatter', 'model'), default='scatter')
    p.add_argument('--variant', type=str, default=None)
    p.add_argument('--checkpoint', type=str, default=None)
    p.add_argument('--J', type=int, default=3)
    p.add_argument('--L', type=int, default=8)
    p.add_argument('--order', type=int, choices=(0, 1, 2), default=2)
    p.add_argument('--size', type=int, default=64)
    p.add_argument('--repeats', type=int, default=20)
    parser.subcommands = sub.choices
    return parser


def suggest(argv: Sequence[str], parser: CliParser, message: str) -> str:
    """Message d'erreur complété d'une suggestion « vouliez-vous dire … ? »."""
    if argv and not argv[0].startswith('-') and argv[0] not in COMMANDS:
        close = difflib.get_close_matches(argv[0], COMMANDS, n=1)
        message = f"Sous-commande inconnue : {argv[0]}"
        return f"{message} (vouliez-vous dire « {close[0]} » ?)" if close else message
    unknown = re.findall(r'(--[\w-]+)', message.split('unrecognized arguments:')[-1]) \
        if 'unrecognized arguments' in message else []
    if unknown and argv and argv[0] in COMMANDS:
        subparser = parser.subcommands[argv[0]]
        options = [o for action in subparser._actions for o in action.option_strings if o.startswith('--')]
        close = difflib.get_close_matches(unknown[0], options, n=1)
        if close:
            return f"{message} (vouliez-vous dire « {close[0]} » ?)"
    return message


def dispatch(argv: Sequence[str]) -> int:
    """
    Exécute une sous-commande.

    Returns:
        0 en cas de succès, 1 pour une erreur d'utilisation, 2 pour un échec d'exécution
    """
    argv = list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"Sous-commande requise parmi : {', '.join(COMMANDS)}")
        if args.threads < 1:
            raise UsageError(f"--threads doit être ≥ 1 (reçu {args.threads})")
        config = load_config(args.config)
    except UsageError as e:
        print(f"Erreur: {suggest(argv, parser, str(e))}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(levelname)s %(name)s: %(message)s')
    numerics.set_precision(args.precision)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    snapshot = {'argv': argv, 'file': config, 'precision': args.precision, 'threads': args.threads}
    manifest = RunManifest(command=args.command, config=snapshot, seed=args.seed)
    started = time.perf_counter()
    manifest.wall_clock['started_at'] = datetime.now(timezone.utc).isoformat()
    code = EXIT_OK
    try:
        outputs = HANDLERS[args.command](args, config, out_dir, snapshot)
        manifest.outputs = [str(Path(p).relative_to(out_dir)) for p in outputs]
        manifest.status = "ok"
    except (UsageError, ValidationError) as e:
        print(f"Erreur: {e}", file=sys.stderr)
        manifest.status, manifest.error, code = "usage_error", str(e), EXIT_USAGE
    except Exception as e:
        logger.exception("Échec de %s", args.command)
        print(f"✗ Erreur: {e}", file=sys.stderr)
        manifest.status, manifest.error, code = "failed", str(e), EXIT_FAILURE
    finally:
        manifest.wall_clock['elapsed_s'] = round(time.perf_counter() - started, 3)
        manifest.write(out_dir)
    if code == EXIT_OK:
        print("\n" + "=" * 60)
        print("TRAITEMENT TERMINÉ")
        print("=" * 60)
        print(f"Répertoire de sortie: {out_dir}")
        print("=" * 60)
    return code


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == '__main__':
    main()
