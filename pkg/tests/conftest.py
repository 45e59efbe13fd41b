"""Shared pytest configuration."""

from manigrid.manifolds import TestFunction

# the observable dataclass is named like a test class; keep pytest from
# trying to collect it when test modules import it
TestFunction.__test__ = False
