import sys

from erclip.cli import main

sys.exit(main())
