#!/usr/bin/env python3
"""Export a PyTorch model + activation dumps; see entroprune_torch.export."""
import sys

from entroprune_torch.export import main

if __name__ == "__main__":
    sys.exit(main())
