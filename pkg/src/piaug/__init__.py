"""Vehicle dynamics learning with physics-informed augmentation.

Library + CLI covering: an extended kinematic bicycle model, a neural
one-step dynamics model trained with combined data/physics losses on
velocity-scaled augmented data, an MPPI controller, and a synthetic
off-road world simulator used for data generation and evaluation.
"""

__version__ = "0.1.0"
