from __future__ import annotations

import sys

from fedpriv.cli import main


sys.exit(main())
