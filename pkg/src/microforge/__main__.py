"""Module entry point: ``python -m microforge``."""

import sys

from .cli import main

sys.exit(main())
