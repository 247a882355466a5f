import sys

from quanta.main import main

sys.exit(main())
