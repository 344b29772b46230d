"""Allow `python -m hiertax ...` as an alternative to the installed script."""

import sys

from .cli import main

sys.exit(main())
