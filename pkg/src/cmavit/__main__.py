import sys

from cmavit.cli import main

sys.exit(main())
