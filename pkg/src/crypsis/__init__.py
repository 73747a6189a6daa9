"""Coevolution of camouflaged prey textures against learning predators."""
__version__ = "0.1.0"
