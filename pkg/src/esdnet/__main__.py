import sys

from esdnet.cli import main

sys.exit(main())
