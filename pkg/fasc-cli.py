#
#   Start up the FASC toolkit CLI
#   Intended as an entry point to enable pyinstaller to create a combined binary.
#
import sys

from fasc.cli import main

sys.exit(main())
