#!/usr/bin/env python3
"""Rebuild a trainable model from a (pruned) net.json; see entroprune_torch.importer."""
import sys

from entroprune_torch.importer import main

if __name__ == "__main__":
    sys.exit(main())
