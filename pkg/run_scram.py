import sys
import os

# Add backend to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "backend")))

from cli import main  # noqa: E402


if __name__ == "__main__":
    sys.exit(main())
