"""Training commands: optimization runs and the self-check suite.

Commands:
    train --manifest M --out DIR [--steps N] [--resume CKPT] [ablation flags]
    check [--seed S]
"""

import argparse
import tempfile
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Tuple

import numpy as np

from core.config import RunConfig
from services.dsp import StftConfig, Waveform, istft, stft
from services.evaluation import evaluate_separation
from services.fixtures import make_synthetic_fixture
from services.manifest import load_manifest
from services.trainer import gradient_check, train
from utils.summaries import SummaryBuilder
from utils.time_utils import Stopwatch, format_duration

if TYPE_CHECKING:
    from core.cli import Dispatcher

ROUND_TRIP_SIGNALS = 100
ROUND_TRIP_TOLERANCE = 1e-6
ORACLE_SDR_FLOOR = 20.0


def ablation_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Settings implied by the ablation flags."""
    overrides: Dict[str, Any] = {}
    if args.no_cross_modal_loss:
        overrides['loss.cross_modal'] = False
    if args.no_consistency_loss:
        overrides['loss.consistency'] = False
    if args.static_face_only:
        overrides['model.visual_feature'] = 'static_face'
    if args.lip_motion_only:
        overrides['model.visual_feature'] = 'lip_motion'
    if args.audio_only:
        overrides['model.visual_feature'] = 'none'
    return overrides


class TrainingCommands:
    """Commands that train models and verify the numerical core."""

    GROUP = 'training'

    def __init__(self, cli: 'Dispatcher'):
        self.cli = cli

    def register(self) -> None:
        train_parser = self.cli.add_command('train', self.GROUP, 'train a separator on a manifest', self.train)
        train_parser.add_argument('--manifest', required=True)
        train_parser.add_argument('--out', required=True, help='directory for checkpoints and the step log')
        train_parser.add_argument('--steps', type=int, default=None, help='override train.max_steps')
        train_parser.add_argument('--resume', default=None, help='checkpoint to resume from')
        train_parser.add_argument('--dedicated', action='store_true', help='dedicated_two_speaker mode')
        train_parser.add_argument('--corruption', action='store_true', help='corrupt lip inputs while training')
        train_parser.add_argument('--enhancement', action='store_true', help='add non-speech noise to mixtures')
        train_parser.add_argument('--noise-dir', default=None, help='noise WAVs for --enhancement')
        ablations = train_parser.add_mutually_exclusive_group()
        ablations.add_argument('--static-face-only', action='store_true')
        ablations.add_argument('--lip-motion-only', action='store_true')
        ablations.add_argument('--audio-only', action='store_true',
                               help='no visual streams; two unordered masks trained with PIT')
        train_parser.add_argument('--no-cross-modal-loss', action='store_true')
        train_parser.add_argument('--no-consistency-loss', action='store_true')

        check = self.cli.add_command('check', self.GROUP,
                                     'gradient check, DSP round-trip and oracle-mask pipeline',
                                     self.check, default_config='tiny')
        check.add_argument('--params', type=int, default=200, help='parameters sampled by the gradient check')
        check.add_argument('--skip-oracle', action='store_true', help='skip the oracle-mask pipeline check')

    # ==================== Handlers ====================

    def train(self, args: argparse.Namespace) -> int:
        extra = ablation_overrides(args)
        extra.update({
            'train.max_steps': args.steps,
            'data.corruption': True if args.corruption else None,
            'data.enhancement': True if args.enhancement else None,
            'data.noise_dir': args.noise_dir,
            'model.mode': 'dedicated_two_speaker' if args.dedicated else None,
        })
        run = self.cli.run_config(args, extra)
        manifest = self.cli.read_manifest(args.manifest, run)
        with Stopwatch() as watch:
            summary = train(run, manifest, Path(args.out), Path(args.resume) if args.resume else None)
        print(SummaryBuilder.training(summary, watch.elapsed))
        return 0

    @staticmethod
    def _round_trip(seed: int, stft_cfg: StftConfig) -> Tuple[bool, str]:
        rng = np.random.default_rng(seed)
        worst = 0.0
        n = 40800
        edge = stft_cfg.fft_size
        with Stopwatch() as watch:
            for _ in range(ROUND_TRIP_SIGNALS):
                w = Waveform(rng.standard_normal(n))
                y = istft(stft(w, stft_cfg), stft_cfg, n)
                a, b = w.samples[edge:-edge], y.samples[edge:-edge]
                worst = max(worst, float(np.linalg.norm(a - b) / np.linalg.norm(a)))
        detail = (f"max relative error {worst:.2e} over {ROUND_TRIP_SIGNALS} signals "
                  f"in {format_duration(watch.elapsed)}")
        return worst <= ROUND_TRIP_TOLERANCE, detail

    @staticmethod
    def _oracle(run: RunConfig) -> Tuple[bool, str]:
        with tempfile.TemporaryDirectory() as tmp:
            fixture = make_synthetic_fixture(run.seed, 3, 1, Path(tmp), duration=2.0)
            manifest = load_manifest(str(fixture.manifest_path))
            report = evaluate_separation(manifest, run, backend='oracle', protocol='all', n_pairs=4)
        sdr = report['aggregate']['sdr']
        return sdr >= ORACLE_SDR_FLOOR, f"mean SDR {sdr:.2f} dB over {report['n_pairs']} pair(s)"

    def check(self, args: argparse.Namespace) -> int:
        run = self.cli.run_config(args)
        results: List[Tuple[str, bool, str]] = []

        report = gradient_check(run, run.seed, n_params=args.params)
        results.append(('gradient', report.passed,
                        f"{report.n_checked} checked, {report.n_skipped} skipped, "
                        f"max rel err {report.max_rel_error:.2e}"))
        zero = gradient_check(run, run.seed, n_params=args.params, zero_loss=True)
        results.append(('gradient-zero-loss', zero.passed, f"max |g| {zero.max_abs_grad:.2e}"))

        ok, detail = self._round_trip(run.seed, StftConfig.from_settings(run.section('stft')))
        results.append(('dsp-round-trip', ok, detail))

        if not args.skip_oracle:
            ok, detail = self._oracle(run)
            results.append(('oracle-masks', ok, detail))

        print(SummaryBuilder.checks(results))
        return 0 if all(ok for _, ok, _ in results) else 1


def setup(cli: 'Dispatcher') -> None:
    """Register the training commands with the dispatcher."""
    TrainingCommands(cli).register()
