import sys

from samora.cli import main

sys.exit(main())
