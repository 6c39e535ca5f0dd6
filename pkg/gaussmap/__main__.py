import sys

from gaussmap.main import main

sys.exit(main())
