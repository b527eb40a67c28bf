import sys

from lmdp.cli import main

sys.exit(main())
