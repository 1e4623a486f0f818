import sys

from tuberepair.cli import main

sys.exit(main())
