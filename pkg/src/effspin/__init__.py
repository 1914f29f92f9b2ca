"""Localized effective spins in gapped quantum spin chains.

Exact matrix-product constructions for the spin-1 AKLT chain doped with
S=3/2 impurities, and variationally optimized uniform MPS with finite
"windows" for the bond-alternating Heisenberg chain with bond defects.
"""

__version__ = "0.1.0"

from . import aklt, analysis, linalg, spins, transfer, vumps, window

__all__ = ["aklt", "analysis", "linalg", "spins", "transfer", "vumps", "window", "__version__"]
