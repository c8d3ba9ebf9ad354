"""Modules package - command groups registered with the dispatcher."""
