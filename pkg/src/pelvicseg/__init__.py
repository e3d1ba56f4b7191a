"""Three-stage pelvic segmentation: localization, per-organ nets, and an
anatomy-guided multi-task target network with Monte-Carlo-dropout uncertainty.

Synthetic pelvic phantoms stand in for clinical CT; the target volume has no
intensity signature and is defined purely by neighboring-organ geometry.
"""

__version__ = "0.1.0"
