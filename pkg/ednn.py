#!/usr/bin/env python
"""EDNN command line: python ednn.py {run|bench|eigs|train-init|exact|mesh} [flags]"""

import sys

from lib.cli import main

if __name__ == '__main__':
    sys.exit(main())
