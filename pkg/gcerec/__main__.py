import sys

from gcerec.main import main

sys.exit(main())
