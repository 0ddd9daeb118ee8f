"""Few-step distillation of a flow-matching teacher with distribution matching
and a discriminator-driven group policy-gradient reward, on a 2-D Gaussian ring."""

__version__ = "0.1.0"
