import sys

from hopgraph.harness.cli import main

sys.exit(main())
