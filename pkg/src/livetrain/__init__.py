"""Interactive training control: live intervention commands for a running
training loop, with branching checkpoints, intervention logging, and
deterministic replay."""

__version__ = "0.1.0"
