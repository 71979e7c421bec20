"""Overlapping temporal decomposition for long-horizon optimal control."""
