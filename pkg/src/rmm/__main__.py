import sys

from rmm.cli import main

sys.exit(main())
