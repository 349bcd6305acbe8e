"""Desk-scale federated learning lab for two-stage Byzantine-robust training.

Stage one condenses client data by distribution matching and rectifies
flipped labels on the server; stage two scores client updates against a
base update computed from the rectified condensed pool.
"""

__version__ = "0.1.0"
