"""
Run any savae command from a checkout without installing the package.

Usage:
    python scripts/run_experiment.py synth --config configs/tiny.json
    python scripts/run_experiment.py reproduce table1 --config configs/table1_reduced.json
"""

import os
import sys

# ensure project root (folder containing `savae/`) is on sys.path
THIS_FILE = os.path.abspath(__file__)
SCRIPTS_DIR = os.path.dirname(THIS_FILE)
PROJECT_ROOT = os.path.abspath(os.path.join(SCRIPTS_DIR, ".."))

if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from savae.cli import main


if __name__ == "__main__":
    sys.exit(main())
