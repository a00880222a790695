#!/usr/bin/env python3
"""
GroupMix CLI entry point.

Usage:
    python gmx_cli.py describe --preset T
    python gmx_cli.py cost --preset B --res 224
    python gmx_cli.py gradcheck --scale tiny
    python gmx_cli.py train --steps 2000 --out-dir runs/toy
"""
from groupmix.cli import main

if __name__ == "__main__":
    main()
