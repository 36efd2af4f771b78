#!/usr/bin/env python3
"""
ampost - command entry point

Usage: python3 ampost.py <command> [args...]
"""

from src.cli import main

if __name__ == "__main__":
    main()
