#!/usr/bin/env python3
"""Entry point script for the B-minus tree bench."""

import sys

from bminus.main import main

if __name__ == "__main__":
    sys.exit(main())
