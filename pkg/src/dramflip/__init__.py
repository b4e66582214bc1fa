"""Simulated RowHammer / RowPress fault injection and DRAM-profile-aware bit-flip attacks."""

__version__ = "0.1.0"
