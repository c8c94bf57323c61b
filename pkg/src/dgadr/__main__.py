"""Allow ``python -m dgadr``."""

import sys

from dgadr.cli import main

sys.exit(main())
