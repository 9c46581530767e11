"""Main entry point for XBusNet."""

import sys

from src.cli import EXIT_FAILURE, XBusNetCLI


def main():
    """
    Main entry point.

    This function:
    1. Parses the subcommand and its flags
    2. Loads the key=value config file, environment and flag overrides
    3. Runs the subcommand and exits with its status code
       (0 success, 2 usage/config error, 3 numerical failure)
    """
    try:
        status = XBusNetCLI().run(sys.argv[1:])
    except KeyboardInterrupt:
        print("\n\n✓ Stopped by user (Ctrl+C)")
        status = EXIT_FAILURE
    sys.exit(status)


if __name__ == "__main__":
    main()
