"""
Utils package initialization.
"""
