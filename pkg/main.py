#!/usr/bin/env python3
"""
LAPRAN CS Toolkit - Main Entry Point
Delegates to the command-line interface
"""

import sys

from src.cli_interface import main as cli_main


def main() -> int:
    """Main entry point for the LAPRAN CS toolkit"""
    return cli_main()


if __name__ == "__main__":
    sys.exit(main())
