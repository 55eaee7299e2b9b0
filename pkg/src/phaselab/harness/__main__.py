import sys

from phaselab.harness.cli import main

sys.exit(main())
