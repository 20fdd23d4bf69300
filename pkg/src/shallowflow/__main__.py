import sys

from shallowflow.driver import main

sys.exit(main())
