"""Core module: settings, logging, errors"""
from vti.core.config import Settings, get_settings, load_settings
from vti.core.errors import (
    ContractViolation,
    DatasetIOError,
    DomainError,
    FormatError,
    ParseError,
    TrainingError,
    VtiError,
)
from vti.core.logger import log, log_debug, log_error, log_info, log_warning, setup_logging

__all__ = [
    "Settings",
    "get_settings",
    "load_settings",
    "log",
    "log_info",
    "log_error",
    "log_warning",
    "log_debug",
    "setup_logging",
    "VtiError",
    "ContractViolation",
    "DomainError",
    "ParseError",
    "FormatError",
    "DatasetIOError",
    "TrainingError",
]
