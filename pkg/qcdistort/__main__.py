import sys

from qcdistort.main import main

sys.exit(main())
