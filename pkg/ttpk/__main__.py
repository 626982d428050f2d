import sys

from ttpk.cli import main

sys.exit(main())
