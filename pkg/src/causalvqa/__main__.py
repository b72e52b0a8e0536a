"""Entry point for python -m causalvqa."""

from .cli import main

if __name__ == "__main__":
    main()
