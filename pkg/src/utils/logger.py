import logging
import sys
from pathlib import Path
from typing import Optional


class ExperimentLogger:
    """Console (warnings and up) plus optional file logging for one named logger."""

    def __init__(self, name: str, log_file: Optional[str] = None, level=logging.INFO):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(level)

        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )

        # Console handler - only show warnings and errors
        if not any(getattr(h, "_advfusion_console", False) for h in self.logger.handlers):
            console_handler = logging.StreamHandler(sys.stdout)
            console_handler.setLevel(logging.WARNING)
            console_handler.setFormatter(formatter)
            console_handler._advfusion_console = True
            self.logger.addHandler(console_handler)

        self.log_file = None
        if log_file:
            log_path = Path(log_file).resolve()
            log_path.parent.mkdir(parents=True, exist_ok=True)
            existing = {getattr(h, "baseFilename", None) for h in self.logger.handlers}
            if str(log_path) not in existing:
                file_handler = logging.FileHandler(log_path)
                file_handler.setLevel(level)
                file_handler.setFormatter(formatter)
                self.logger.addHandler(file_handler)
            self.log_file = log_path

    def close(self) -> None:
        """Detach and close the file handler for this run"""
        for handler in list(self.logger.handlers):
            if self.log_file is not None and getattr(handler, "baseFilename", None) == str(self.log_file):
                handler.close()
                self.logger.removeHandler(handler)

    def debug(self, msg: str):
        self.logger.debug(msg)

    def info(self, msg: str):
        self.logger.info(msg)

    def warning(self, msg: str):
        self.logger.warning(msg)

    def error(self, msg: str):
        self.logger.error(msg)

    def critical(self, msg: str):
        self.logger.critical(msg)
