import sys

from slcf.cli import main

sys.exit(main())
