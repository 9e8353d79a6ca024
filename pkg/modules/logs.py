import logging
import os
from pathlib import Path
from typing import Optional, Union

LOG_FORMAT = "%(levelname)s [%(name)s]: %(message)s"

_HANDLER_TAG = "_polgrad_handler"


def setup_logging(level: Optional[str] = None, log_file: Optional[Union[str, Path]] = None) -> logging.Logger:
    level_name = (level or os.environ.get("POLGRAD_LOG_LEVEL") or "INFO").upper()
    root = logging.getLogger("modules")
    root.setLevel(getattr(logging, level_name, logging.INFO))

    for handler in list(root.handlers):
        if getattr(handler, _HANDLER_TAG, False):
            root.removeHandler(handler)
            handler.close()

    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter(LOG_FORMAT))
    setattr(console, _HANDLER_TAG, True)
    root.addHandler(console)

    if log_file is not None:
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        setattr(file_handler, _HANDLER_TAG, True)
        root.addHandler(file_handler)

    return root
