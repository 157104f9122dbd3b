import sys
from pathlib import Path

# make the shared helper/oracle modules importable from any test
sys.path.insert(0, str(Path(__file__).parent))
