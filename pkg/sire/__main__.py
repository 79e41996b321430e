import sys

from sire.cli import main

if __name__ == "__main__":
    sys.exit(main())
