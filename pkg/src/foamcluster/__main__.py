import sys

from foamcluster.cli import main

sys.exit(main())
