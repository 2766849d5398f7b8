import sys

from deskrec.console import main

if __name__ == "__main__":
    sys.exit(main())
