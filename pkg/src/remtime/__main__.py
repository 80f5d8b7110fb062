import sys

from remtime.cli import main

sys.exit(main())
