"""Core package - configuration, errors and the command dispatcher."""
