"""Learn and evaluate individualized treatment-assignment policies from A/B-test logs."""

__version__ = "0.1.0"
