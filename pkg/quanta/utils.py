# QuanTA - Utilities Module
# Output files and environment settings shared by the commands

import csv
import json
import logging
import math
import os

from quanta.constants import THREADS_ENV_VAR
from quanta.errors import ConfigError

logger = logging.getLogger(__name__)


def write_csv(path, rows, fieldnames=None):
    """
    Write a list of dicts as CSV with a header row

    NaN values are written as empty cells.
    """
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    with open(path, "w", newline="") as file:
        writer = csv.DictWriter(file, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({
                key: "" if isinstance(value, float) and math.isnan(value) else value
                for key, value in row.items()
            })
    logger.info("wrote %d row(s) to %s", len(rows), path)


def write_json(path, data):
    """Write a JSON summary with sorted keys"""
    with open(path, "w") as file:
        json.dump(data, file, indent=2, sort_keys=True)
        file.write("\n")
    logger.info("wrote %s", path)


def default_thread_count():
    """Worker count from the environment, 1 when unset"""
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None or raw.strip() == "":
        return 1
    try:
        count = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from None
    if count < 1:
        raise ConfigError(f"{THREADS_ENV_VAR} must be positive, got {count}")
    return count
