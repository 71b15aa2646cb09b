#!/usr/bin/env python3
"""Script to run the traffic density command-line tool."""
import sys

from app.main import main

if __name__ == "__main__":
    sys.exit(main())
