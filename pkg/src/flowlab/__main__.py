import sys

from .expcli.cli import main

sys.exit(main())
