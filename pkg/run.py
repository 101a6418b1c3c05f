#!/usr/bin/env python3
"""
Run script for the virtual microphone toolkit.
Forwards the command line to the click CLI, e.g.

    python run.py gen-data --out data
    python run.py sweep --data data --out runs/sweep
"""

import sys
import os

# Add the src directory to the path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from app import main

if __name__ == '__main__':
    main()
