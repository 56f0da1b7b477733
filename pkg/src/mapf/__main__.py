import sys

from mapf.cli import main

sys.exit(main())
