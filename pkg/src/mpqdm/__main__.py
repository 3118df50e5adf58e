"""Allow ``python -m mpqdm``."""
import sys

from .cli import main

sys.exit(main())
