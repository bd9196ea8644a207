import sys

from pvhnet.cli import main

sys.exit(main())
