import sys

from snrjscc.cli import main

sys.exit(main())
