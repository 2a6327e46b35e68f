import sys

from uamrl.cli import main

sys.exit(main())
