import logging
import logging.handlers
import sys
from typing import Optional
from ppg2resp.core.config import get_settings

def setup_logging(level: Optional[str] = None, log_to_file: bool = True):
    """Setup logging configuration"""

    # Get settings
    settings = get_settings()

    # Configure logging format
    log_format = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    # Create logger
    logger = logging.getLogger()
    logger.setLevel(getattr(logging, (level or settings.log_level).upper()))

    # Clear existing handlers
    logger.handlers.clear()

    # Console handler goes to stderr so stdout stays clean for tables and reports
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(getattr(logging, (level or settings.log_level).upper()))
    console_handler.setFormatter(log_format)
    if hasattr(console_handler.stream, 'reconfigure'):
        console_handler.stream.reconfigure(encoding='utf-8')
    logger.addHandler(console_handler)

    if log_to_file:
        log_file = settings.resolved_log_file
        log_file.parent.mkdir(parents=True, exist_ok=True)
        # File handler with rotation and UTF-8 encoding
        file_handler = logging.handlers.RotatingFileHandler(
            log_file,
            maxBytes=10*1024*1024,  # 10MB
            backupCount=5,
            encoding='utf-8'
        )
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(log_format)
        logger.addHandler(file_handler)

    # Set specific logger levels
    logging.getLogger("dotenv").setLevel(logging.WARNING)

    return logger

def get_logger(name: str) -> logging.Logger:
    """Get a logger instance with the given name"""
    return logging.getLogger(name)
