"""Evaluation commands: separation quality, cross-modal verification, embedding export.

Commands:
    eval-sep --manifest M --out REPORT.json (--checkpoint C | --oracle-masks | --mixture-baseline)
    eval-verify --manifest M --checkpoint C [--out REPORT.json]
    export-embeddings --manifest M --checkpoint C --out TABLE.csv
"""

import argparse
from pathlib import Path
from typing import TYPE_CHECKING

from core.errors import ConfigError
from services.evaluation import PROTOCOLS, evaluate_separation, evaluate_verification, export_embeddings
from services.persistence import PersistenceService
from services.report_processor import write_report
from services.tuples import SegmentSpec
from utils.summaries import SummaryBuilder

if TYPE_CHECKING:
    from core.cli import Dispatcher


class EvaluationCommands:
    """Commands that score separators and export embeddings."""

    GROUP = 'evaluation'

    def __init__(self, cli: 'Dispatcher'):
        self.cli = cli

    def register(self) -> None:
        sep = self.cli.add_command('eval-sep', self.GROUP, 'evaluate separation on seeded synthetic pairs',
                                   self.eval_sep)
        sep.add_argument('--manifest', required=True)
        sep.add_argument('--out', required=True, help='JSON report path')
        backends = sep.add_mutually_exclusive_group(required=True)
        backends.add_argument('--checkpoint', default=None)
        backends.add_argument('--oracle-masks', action='store_true', help='use ground-truth masks')
        backends.add_argument('--mixture-baseline', action='store_true', help='use the mixture as every estimate')
        sep.add_argument('--protocol', choices=PROTOCOLS, default=None)
        sep.add_argument('--pairs', type=int, default=None, help='override eval.n_pairs')
        sep.add_argument('--xlsx', action='store_true', help='also write a styled workbook next to the report')

        verify = self.cli.add_command('eval-verify', self.GROUP, 'cross-modal face-voice verification',
                                      self.eval_verify, default_config=None)
        verify.add_argument('--manifest', required=True)
        verify.add_argument('--checkpoint', required=True)
        verify.add_argument('--out', default=None, help='optional JSON report path')

        export = self.cli.add_command('export-embeddings', self.GROUP, 'write face and voice embeddings as CSV',
                                      self.export, default_config=None)
        export.add_argument('--manifest', required=True)
        export.add_argument('--checkpoint', required=True)
        export.add_argument('--out', required=True)

    # ==================== Handlers ====================

    def eval_sep(self, args: argparse.Namespace) -> int:
        model = None
        if args.checkpoint:
            model, run = self.cli.load_model(args)
            backend = 'model'
        else:
            run = self.cli.run_config(args)
            backend = 'oracle' if args.oracle_masks else 'mixture'
        manifest = self.cli.read_manifest(args.manifest, run)
        workers = args.workers if args.workers is not None else 0
        report = evaluate_separation(manifest, run, backend=backend, model=model, protocol=args.protocol,
                                     n_pairs=args.pairs, workers=workers)
        write_report(report, Path(args.out), ('xlsx',) if args.xlsx else ())
        print(SummaryBuilder.separation_report(report))
        return 0

    def eval_verify(self, args: argparse.Namespace) -> int:
        model, run = self.cli.load_model(args)
        manifest = self.cli.read_manifest(args.manifest, run)
        if model.face is None:
            raise ConfigError("checkpoint has no facial attributes stream to verify against")
        report = evaluate_verification(manifest, model, SegmentSpec.from_config(run))
        if args.out:
            PersistenceService.save_json(Path(args.out), {
                'config_digest': run.digest,
                'seed': run.seed,
                'n_clips': len(manifest),
                'aggregate': report.to_json(),
            })
        print(SummaryBuilder.verification(report))
        return 0

    def export(self, args: argparse.Namespace) -> int:
        model, run = self.cli.load_model(args)
        manifest = self.cli.read_manifest(args.manifest, run)
        rows = export_embeddings(model, manifest, Path(args.out), SegmentSpec.from_config(run), run.digest, run.seed)
        print(f"Exported {rows} embedding row(s) to {args.out}")
        return 0


def setup(cli: 'Dispatcher') -> None:
    """Register the evaluation commands with the dispatcher."""
    EvaluationCommands(cli).register()
