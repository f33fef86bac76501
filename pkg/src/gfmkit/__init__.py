"""Grid-forming converter control toolkit.

Subpackages: linsys (linear-systems kernel), plant (nonlinear converter
model), controllers (control transfer matrices), synthesis (structured
H-infinity gain design), simkit (nonlinear time-domain simulation), cli.
"""

__version__ = "0.1.0"
