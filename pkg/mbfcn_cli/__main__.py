"""Entry point for the mbfcn-cli application."""

from mbfcn_cli.cli import main

if __name__ == "__main__":
    main()
