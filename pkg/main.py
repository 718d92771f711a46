#!/usr/bin/env python3
"""
DPTCO - Main Entry Script
Thin wrapper around dptco.cli so the tool runs from a checkout.
"""

import sys

from dptco.cli import main


if __name__ == "__main__":
    sys.exit(main())
