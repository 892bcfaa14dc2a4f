"""Abstract domains: numeric values, flat kernel memory, weak type-based shape."""
