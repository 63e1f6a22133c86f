import sys

from bafnet.cli import main

sys.exit(main())
