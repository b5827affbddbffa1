"""Main entry point for wmbench."""

from .cli import main

if __name__ == "__main__":
    main()
