"""Backward-compatible wrapper for ``python src/main.py``."""
import sys

from mrfgat import cli


def main() -> int:
    """Delegate to the packaged CLI entrypoint."""
    return cli.main()


if __name__ == "__main__":
    sys.exit(main())
