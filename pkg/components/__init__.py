"""
Components package initialization.
"""
