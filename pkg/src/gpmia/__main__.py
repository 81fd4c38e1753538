import sys

from gpmia.cli import main

sys.exit(main())
