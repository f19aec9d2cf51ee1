"""
Logging utilities for the PiLaMIM laboratory.
"""
import logging
import os


def setup_logger(level: str = None):
    """Configure logging"""
    level = (level or os.getenv("PILAMIM_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logger = logging.getLogger("pilamim")
    logger.setLevel(level)
    return logger

# Create a logger instance
logger = setup_logger()
