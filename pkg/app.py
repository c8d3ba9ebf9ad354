"""
Audio-visual speech separation

Single entry point for fixture generation, tuple preview, training,
separation, enhancement and evaluation.

Usage:
    python app.py <command> [options]
    python app.py --help

Environment Variables:
    AVSEP_CACHE: Fixture cache directory (optional, default: .avsep_cache)
    AVSEP_LOG_LEVEL: Logging level (optional, default: INFO)
    AVSEP_WORKERS: Default worker threads for data and evaluation (optional, default: 0)
"""

import sys

from core.config import Config
from core.cli import dispatch


def main() -> None:
    """Main entry point for the command line."""
    # Validate configuration
    if not Config.validate():
        sys.exit(1)

    sys.exit(dispatch(sys.argv[1:]))


if __name__ == '__main__':
    main()
