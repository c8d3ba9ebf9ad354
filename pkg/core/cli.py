"""Command dispatcher: shared run state, argument parsing and command-group loading."""

import argparse
import importlib
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from core.config import Config, PRESETS, RunConfig
from core.errors import AvsepError, ConfigError
from services.manifest import Manifest, load_manifest
from services.networks import AudioVisualSeparator, ModelConfig
from services.trainer import load_checkpoint
from services.tuples import SegmentSpec

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DOMAIN_ERROR = 1
EXIT_USAGE = 2

COMMAND_MODULES = (
    'modules.data',
    'modules.training',
    'modules.separation',
    'modules.evaluation',
)

Handler = Callable[[argparse.Namespace], int]


@dataclass
class Command:
    name: str
    group: str
    handler: Handler


class Dispatcher:
    """Owns the parser and every registered command.

    Command groups are modules exposing `setup(cli)`; each registers its
    subcommands with add_command.
    """

    def __init__(self, modules: Sequence[str] = COMMAND_MODULES):
        self.parser = argparse.ArgumentParser(
            prog='avsep',
            description='Audio-visual speech separation: data, training, separation and evaluation.',
        )
        self.subparsers = self.parser.add_subparsers(dest='command', metavar='COMMAND')
        self.commands: Dict[str, Command] = {}
        for name in modules:
            self.load_module(name)

    # ==================== Registration ====================

    def load_module(self, name: str) -> None:
        module = importlib.import_module(name)
        module.setup(self)

    def add_command(self, name: str, group: str, help_text: str, handler: Handler,
                    default_config: Optional[str] = 'desk') -> argparse.ArgumentParser:
        """Register a subcommand with the shared run flags; returns its parser for extra flags."""
        if name in self.commands:
            raise ConfigError(f"command '{name}' registered twice")
        sub = self.subparsers.add_parser(name, help=help_text, description=help_text)
        sub.add_argument('--config', default=None,
                         help=f"preset ({', '.join(sorted(PRESETS))}) or JSON config file"
                              + (f" (default: {default_config})" if default_config else ""))
        sub.add_argument('--seed', type=int, default=None, help='seed for all randomness')
        sub.add_argument('--workers', type=int, default=None, help='data/evaluation worker threads')
        sub.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                         help='override one setting, e.g. model.channel_scale=0.25')
        sub.set_defaults(default_config=default_config)
        self.commands[name] = Command(name, group, handler)
        return sub

    # ==================== Run Configuration ====================

    @staticmethod
    def parse_overrides(pairs: Sequence[str]) -> Dict[str, str]:
        overrides: Dict[str, str] = {}
        for pair in pairs:
            key, sep, value = pair.partition('=')
            if not sep or not key:
                raise ConfigError(f"--set expects KEY=VALUE, got '{pair}'")
            overrides[key.strip()] = value.strip()
        return overrides

    def flag_overrides(self, args: argparse.Namespace, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        overrides: Dict[str, Any] = dict(self.parse_overrides(args.overrides))
        if args.seed is not None:
            overrides['seed'] = args.seed
        if args.workers is not None:
            overrides['train.workers'] = args.workers
        overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
        return overrides

    def run_config(self, args: argparse.Namespace, extra: Optional[Dict[str, Any]] = None) -> RunConfig:
        """Preset or file named by --config (or the command default), then flags."""
        spec = args.config or args.default_config or 'desk'
        return RunConfig.resolve(spec).with_overrides(self.flag_overrides(args, extra))

    def load_model(self, args: argparse.Namespace,
                   extra: Optional[Dict[str, Any]] = None) -> Tuple[AudioVisualSeparator, RunConfig]:
        """Model and effective run config of --checkpoint.

        With an explicit --config the checkpoint must have been trained with
        the same model settings.
        """
        expected = ModelConfig.from_config(self.run_config(args)) if args.config else None
        state = load_checkpoint(Path(args.checkpoint), expected)
        run = RunConfig(state.run_settings).with_overrides(self.flag_overrides(args, extra))
        state.model.eval()
        return state.model, run

    @staticmethod
    def read_manifest(path: str, run: RunConfig) -> Manifest:
        """Manifest at path; every clip must hold at least one model segment of audio."""
        return load_manifest(path, min_duration=SegmentSpec.from_config(run).duration)

    # ==================== Dispatch ====================

    def dispatch(self, argv: Optional[List[str]] = None) -> int:
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as e:
            return int(e.code) if e.code is not None else EXIT_OK
        if args.command is None:
            self.parser.print_help(sys.stderr)
            return EXIT_USAGE

        Config.configure_logging()
        command = self.commands[args.command]
        try:
            return command.handler(args)
        except AvsepError as e:
            print(f"[Error] {e}", file=sys.stderr)
            return EXIT_DOMAIN_ERROR


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run the command, and map failures to exit codes (0 ok, 1 domain error, 2 usage)."""
    return Dispatcher().dispatch(argv)
