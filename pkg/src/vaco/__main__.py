import sys

from vaco.cli import main

sys.exit(main())
