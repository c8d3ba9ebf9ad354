"""Data commands: synthetic fixture generation and training-tuple preview.

Commands:
    fixture --out DIR [--speakers N] [--clips N] [--duration S] [--noise N]
    sample --manifest M --out DIR [--index K]
"""

import argparse
from pathlib import Path
from typing import TYPE_CHECKING, Dict

import numpy as np

from core.config import Config
from services.fixtures import make_synthetic_fixture
from services.persistence import PersistenceService
from services.tuples import SamplingOptions, SegmentSpec, sample_training_tuple
from utils.audio_io import write_wav
from utils.summaries import SummaryBuilder
from utils.time_utils import Stopwatch

if TYPE_CHECKING:
    from core.cli import Dispatcher


class DataCommands:
    """Commands that write corpora and inspect sampled tuples."""

    GROUP = 'data'

    def __init__(self, cli: 'Dispatcher'):
        self.cli = cli

    def register(self) -> None:
        fixture = self.cli.add_command('fixture', self.GROUP, 'write a synthetic audio-visual corpus', self.fixture)
        fixture.add_argument('--out', default=None, help=f'output directory (default: {Config.CACHE_DIR}/fixture_s<seed>)')
        fixture.add_argument('--speakers', type=int, default=8)
        fixture.add_argument('--clips', type=int, default=4, help='clips per speaker')
        fixture.add_argument('--duration', type=float, default=4.0, help='clip length in seconds')
        fixture.add_argument('--noise', type=int, default=0, help='non-speech noise clips to write')

        sample = self.cli.add_command('sample', self.GROUP, 'preview one training tuple', self.sample)
        sample.add_argument('--manifest', required=True)
        sample.add_argument('--out', required=True)
        sample.add_argument('--index', type=int, default=0, help='tuple index within the seed stream')

    # ==================== Handlers ====================

    def fixture(self, args: argparse.Namespace) -> int:
        run = self.cli.run_config(args)
        with Stopwatch() as watch:
            summary = make_synthetic_fixture(
                run.seed, args.speakers, args.clips,
                Path(args.out) if args.out else None,
                duration=args.duration, noise_clips=args.noise,
            )
        print(SummaryBuilder.fixture(str(summary.manifest_path), summary.n_entries, summary.n_videos,
                                     len(summary.noise_paths), watch.elapsed))
        return 0

    @staticmethod
    def _mask_stats(mask, bound: float) -> Dict[str, float]:
        magnitude = np.hypot(mask.real, mask.imag)
        clamped = (np.abs(mask.real) >= bound) | (np.abs(mask.imag) >= bound)
        return {
            'abs_mean': float(magnitude.mean()),
            'abs_max': float(magnitude.max()),
            'clamped_fraction': float(clamped.mean()),
        }

    def sample(self, args: argparse.Namespace) -> int:
        run = self.cli.run_config(args)
        manifest = self.cli.read_manifest(args.manifest, run)
        seg = SegmentSpec.from_config(run)
        t = sample_training_tuple(manifest, (run.seed, 0, args.index), SamplingOptions.from_config(run), seg)

        out_dir = Path(args.out)
        waves = {'x1': t.x1, 'x2': t.x2, 'sA1': t.sA1, 'sA2': t.sA2, 'sB1': t.sB1, 'sB2': t.sB2}
        for name, wave in waves.items():
            write_wav(out_dir / f"{name}.wav", wave)
        stats = {role: self._mask_stats(mask, seg.mask_bound) for role, mask in t.gt_masks.items()}
        PersistenceService.save_json(out_dir / 'tuple.json', {
            'config_digest': run.digest,
            'seed': run.seed,
            'index': args.index,
            'meta': t.meta,
            'b_gains': list(t.b_gains),
            'segment_samples': seg.segment_samples,
            'mask_stats': stats,
        })
        print(SummaryBuilder.tuple_preview(str(out_dir), stats))
        return 0


def setup(cli: 'Dispatcher') -> None:
    """Register the data commands with the dispatcher."""
    DataCommands(cli).register()
