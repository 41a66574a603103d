"""Batch-incremental ransomware detection over Sysmon event streams."""

__version__ = "0.1.0"
