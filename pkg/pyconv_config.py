#!/usr/bin/env python3
"""
Runtime configuration for the PyConv toolkit
Reads settings from the environment (and a local .env file) once at import
"""

import logging
import os

from dotenv import load_dotenv

load_dotenv()

# --- Configuration ---
LOG_LEVEL = os.getenv('PYCONV_LOG_LEVEL', 'INFO').upper()
THREADS = int(os.getenv('PYCONV_THREADS', '1'))
DEFAULT_SEED = int(os.getenv('PYCONV_SEED', '0'))
DEFAULT_DTYPE = os.getenv('PYCONV_DTYPE', 'float32')

# Gradient checking
GRADCHECK_EPS = float(os.getenv('PYCONV_GRADCHECK_EPS', '1e-4'))
GRADCHECK_THRESHOLD = float(os.getenv('PYCONV_GRADCHECK_THRESHOLD', '1e-5'))

# Toy-scale networks
TOY_WIDTH_DIVISOR = 8


def configure_logging(level: str = None) -> None:
    """Configure root logging once for command-line use"""
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL), logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
