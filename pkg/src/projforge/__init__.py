"""Desk-scale simulation of adversarial 3D projection attacks on object detectors.

Submodules are imported explicitly (``from projforge import attack``) rather
than re-exported here, so that the CLI can configure thread environment
variables before numpy is first loaded.
"""

__version__ = "0.1.0"
