"""Separation commands for arbitrary-length clips.

Commands:
    separate --checkpoint C --audio WAV [--roi DIR --face DIR ...] --out DIR
    enhance --checkpoint C --audio WAV --roi DIR --face DIR --out DIR
"""

import argparse
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Tuple

from core.config import RunConfig
from core.errors import ConfigError
from services.dsp import Waveform
from services.inference import ModelBackend, SeparationResult, WindowConfig, enhance_clip, separate_clip, write_outputs
from services.networks import AudioVisualSeparator
from services.tuples import SegmentSpec
from services.visuals import FaceTrack
from utils.audio_io import read_wav
from utils.summaries import SummaryBuilder

if TYPE_CHECKING:
    from core.cli import Dispatcher

PreparedClip = Tuple[AudioVisualSeparator, RunConfig, SegmentSpec, List[FaceTrack], Waveform]


class SeparationCommands:
    """Commands that run a trained separator on recorded clips."""

    GROUP = 'separation'

    def __init__(self, cli: 'Dispatcher'):
        self.cli = cli

    def _add_inputs(self, parser: argparse.ArgumentParser, speakers: str) -> None:
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--audio', required=True, help='mixture WAV (16 kHz mono)')
        parser.add_argument('--roi', action='append', default=None, help=f'mouth-ROI frame directory ({speakers})')
        parser.add_argument('--face', action='append', default=None, help=f'face crop directory ({speakers})')
        parser.add_argument('--out', required=True)
        parser.add_argument('--clip-id', default=None, help='output name stem (default: audio file stem)')
        parser.add_argument('--hop', type=float, default=None, help='window hop in seconds (default: half a window)')
        parser.add_argument('--blend', choices=('crossfade_hann', 'overlap_average'), default=None)
        parser.add_argument('--random-face-frame', type=int, default=None, metavar='SEED',
                            help='pick the face crop at random from this seed instead of the central one')

    def register(self) -> None:
        separate = self.cli.add_command('separate', self.GROUP, 'separate every visible speaker of a clip',
                                        self.separate, default_config=None)
        self._add_inputs(separate, 'once per speaker')
        enhance = self.cli.add_command('enhance', self.GROUP, 'enhance the target speaker of a clip',
                                       self.enhance, default_config=None)
        self._add_inputs(enhance, 'target speaker')

    # ==================== Handlers ====================

    def _prepare(self, args: argparse.Namespace) -> PreparedClip:
        rois, faces = args.roi or [], args.face or []
        if len(rois) != len(faces):
            raise ConfigError(f"{len(rois)} --roi but {len(faces)} --face directories")
        model, run = self.cli.load_model(args, {'infer.hop': args.hop, 'infer.blend': args.blend})
        seg = SegmentSpec.from_config(run)
        tracks = [FaceTrack.load(roi, face, seg.fps) for roi, face in zip(rois, faces)]
        mixture = read_wav(args.audio, seg.sample_rate)
        return model, run, seg, tracks, mixture

    def _finish(self, args: argparse.Namespace, run: RunConfig, result: SeparationResult) -> int:
        clip_id = args.clip_id or Path(args.audio).stem
        extra: Dict[str, Any] = {'config_digest': run.digest, 'seed': run.seed, 'audio': str(args.audio)}
        if args.random_face_frame is not None:
            extra['face_seed'] = args.random_face_frame
        paths: List[Path] = write_outputs(result, clip_id, Path(args.out), extra)
        print(SummaryBuilder.separation(clip_id, paths, result.n_windows, result.elapsed_ms))
        return 0

    def separate(self, args: argparse.Namespace) -> int:
        model, run, seg, tracks, mixture = self._prepare(args)
        result = separate_clip(mixture, tracks, ModelBackend(model), WindowConfig.from_config(run), seg,
                               face_seed=args.random_face_frame)
        return self._finish(args, run, result)

    def enhance(self, args: argparse.Namespace) -> int:
        model, run, seg, tracks, mixture = self._prepare(args)
        if len(tracks) != 1:
            raise ConfigError("enhance takes exactly one --roi/--face pair (the target speaker)")
        result = enhance_clip(mixture, tracks[0], ModelBackend(model, single_speaker=True),
                              WindowConfig.from_config(run), seg, face_seed=args.random_face_frame)
        return self._finish(args, run, result)


def setup(cli: 'Dispatcher') -> None:
    """Register the separation commands with the dispatcher."""
    SeparationCommands(cli).register()
