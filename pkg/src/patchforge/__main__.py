import sys

from patchforge.cli import main

sys.exit(main())
