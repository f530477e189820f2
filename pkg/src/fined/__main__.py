"""Allow ``python -m fined`` as an alias for the ``fined`` script."""

from .cli import main

if __name__ == "__main__":
    raise SystemExit(main())
