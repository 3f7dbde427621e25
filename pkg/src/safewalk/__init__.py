"""Safe semi-autonomous walking: manifold reduction, polynomial
certificates and guaranteed-safe control for a planar five-link biped."""

__version__ = "0.1.0"
