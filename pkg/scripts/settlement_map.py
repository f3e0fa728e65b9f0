import sys
from pathlib import Path

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.settlements.cli import main

if __name__ == "__main__":
    sys.exit(main())
