"""Entry point for ``python -m casus``."""

import sys


def main():
    """Main entry point."""
    try:
        from casus.cli import main as cli_main

        sys.exit(cli_main())
    except KeyboardInterrupt:
        print("\nInterrupted", file=sys.stderr)
        sys.exit(130)


if __name__ == "__main__":
    main()
