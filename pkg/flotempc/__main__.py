import sys

from flotempc.cli import main

sys.exit(main())
