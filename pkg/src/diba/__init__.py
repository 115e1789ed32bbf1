"""Membership-inference auditing for RLVR fine-tuned policies."""

__version__ = "0.1.0"
