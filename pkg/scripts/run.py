#!/usr/bin/env python
"""
coactseg main execution script.

Usage: python scripts/run.py <phantom|train|infer|eval|gradcheck|ablate|report> [--config FILE] [--key value ...]
"""
import os
import sys

# Cap BLAS threads before numpy is imported
_threads = os.environ.get('COACTSEG_THREADS', '1') or '1'
for _name in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
    os.environ.setdefault(_name, _threads)

# Add the parent directory to the Python path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from coactseg.cli import main

if __name__ == "__main__":
    sys.exit(main())
