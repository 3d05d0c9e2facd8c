"""Wireless resource allocation workbench.

Library of small dense-network learning machinery, classical power-control
baselines, and slotted radio environments (interference-channel power
control, dynamic spectrum access, vehicular spectrum sharing), plus a
seeded experiment harness.
"""

__version__ = "0.1.0"
