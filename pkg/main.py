"""Main entry point for tdeedspot when run as a script.

Loads settings from config and invokes the CLI.
"""

import os
import sys

from config import settings

os.environ.setdefault("LOGURU_LEVEL", settings.logging.level)

from loguru import logger

import tdeedspot
from tdeedspot import cli

tdeedspot.configure_loguru_default_with_skiplog_filter()
logger.enable("tdeedspot")

if __name__ == "__main__":
    # settings become global flags, remaining argv are passed through
    sys.exit(cli.main(settings.as_cli_args() + sys.argv[1:]))
