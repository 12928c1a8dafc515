"""Coin-tumbling protocol simulator.

Subpackages cover elliptic-curve arithmetic, the blind-signature scheme,
a simulated UTXO ledger, the mixing bank and its clients, attacker-model
analysis, and an ECC-versus-RSA benchmark.
"""

__version__ = "0.1.0"
