"""
Main entry point for the Cascade Landmark Localizer
Generates phantom datasets, trains and evaluates coarse-to-fine localizers
"""

import logging
import sys

import config
from landmarker.cli import cli_main


def setup_logging():
    """Configure logging"""
    logging.basicConfig(
        level=getattr(logging, config.LOG_LEVEL),
        format=config.LOG_FORMAT,
        stream=sys.stderr,
    )


def main() -> int:
    """Main execution function"""
    setup_logging()
    return cli_main(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
