#!/usr/bin/env python3
"""Run the training/fine-tuning recipes; see entroprune_torch.recipes."""
import sys

from entroprune_torch.recipes import main

if __name__ == "__main__":
    sys.exit(main())
