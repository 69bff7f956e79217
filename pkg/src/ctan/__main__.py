import sys

from ctan.cli import main

sys.exit(main())
