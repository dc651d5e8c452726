"""Frame-averaged E(3)-equivariant shape autoencoders in numpy."""
__version__ = "0.1.0"
