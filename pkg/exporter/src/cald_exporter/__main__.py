"""Allow ``python -m cald_exporter`` as an alias for the console script."""

from .cli import console_main

if __name__ == "__main__":
    console_main()
