import sys

from attnseg.cli import main

sys.exit(main())
