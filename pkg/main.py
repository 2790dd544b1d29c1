"""
main.py

This is the entry point of the application. It hands the command line to
the simulator CLI (run, sweep, cdf, validate, replay), which installs the
stderr log handler. See cli.py for the commands and their exit codes.
"""

import sys

from cli import main

if __name__ == "__main__":
    sys.exit(main())
