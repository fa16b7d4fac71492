"""
Process-wide settings read from the environment (and an optional .env file)
"""

import os
import logging
from dotenv import load_dotenv

load_dotenv()

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

MCRC_LOG_LEVEL = os.environ.get('MCRC_LOG_LEVEL', 'INFO')
MCRC_LOG_FILE = os.environ.get('MCRC_LOG_FILE')
MCRC_THREADS = int(os.environ.get('MCRC_THREADS', '1'))


def configure_logging(level=None, log_file=None):
    """Configure root logging for command-line runs"""
    level = level or MCRC_LOG_LEVEL
    log_file = log_file or MCRC_LOG_FILE

    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.insert(0, logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True
    )
