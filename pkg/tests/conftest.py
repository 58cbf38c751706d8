"""
Shared pytest setup; ``src`` is on the import path through ``pyproject.toml``.
"""
