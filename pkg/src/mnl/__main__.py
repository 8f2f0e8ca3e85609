import sys

from mnl.cli import main

sys.exit(main())
