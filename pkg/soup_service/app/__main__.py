"""Allow `python -m app <subcommand> ...`."""

from .main import main

main()
