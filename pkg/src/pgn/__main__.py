import sys

from pgn.cli import main

sys.exit(main())
