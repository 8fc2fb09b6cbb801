import sys

from .netharness.cli import main

sys.exit(main())
