import sys

from ffgaf_snn.cli import main

sys.exit(main())
