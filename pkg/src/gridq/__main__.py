import sys

from gridq.cli import main

sys.exit(main())
