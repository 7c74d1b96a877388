#!/usr/bin/env python3
"""Application runner for the errdecode toolkit."""

if __name__ == "__main__":
    import sys

    from main import main

    sys.exit(main())
