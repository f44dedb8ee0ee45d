from __future__ import annotations

import csv
import functools
import logging
import os
from math import ceil, floor
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np


class HypokernelError(Exception):
    """Base class for every error raised by the hypokernel modules"""

    pass


# String alignment
def left_align(yourstring: str, total_len: int, min_pad: int = 0) -> str:
    """Left-aligns specified string using given length and padding.

    Constructs a string of length total_len with yourstring left-aligned and
    padded with spaces on the right. Padding includes at least min_pad spaces,
    cutting off yourstring if required.

    Example: ("examplestring", 15, 1) will create a string that looks like
    this: 'examplestring  '.

    Returns:
        Left-aligned string of total_len with min_pad padding of spaces on the
        right of the text.
    """
    if len(yourstring) >= total_len - min_pad:
        yourstring = yourstring[0 : total_len - (min_pad)]
    space_left = total_len - (len(yourstring) + min_pad)
    right_pad = " " * (space_left + min_pad)
    return yourstring + right_pad


def center_align(yourstring: str, total_len: int, min_pad: int = 0) -> str:
    """Center-aligns specified string using given length and padding.

    If the padding can not be equal on both sides, then an additional +1 padding is
    added to the right side.
    """
    total_min_pad = min_pad * 2
    room_for_string = total_len - total_min_pad
    if len(yourstring) >= room_for_string:
        yourstring = yourstring[0:room_for_string]
    space_left = total_len - len(yourstring)
    left_pad = " " * floor(space_left / 2)
    right_pad = " " * ceil(space_left / 2)
    return left_pad + yourstring + right_pad


def print_table(rows: List[Dict[str, Any]], column_width: int = 14) -> str:
    """
    Render a list of flat dicts as a fixed-width text table, one row per dict.
    Columns are taken from the first row.
    """
    if not rows:
        return ""
    headers = list(rows[0].keys())
    lines = ["".join(center_align(str(h), column_width, 1) for h in headers)]
    for row in rows:
        cells = []
        for header in headers:
            value = row.get(header, "")
            if isinstance(value, float):
                value = "{:.6g}".format(value)
            cells.append(left_align(str(value), column_width, 1))
        lines.append("".join(cells))
    return "\n".join(lines)


def json_default(obj) -> Union[float, int, List[Any], Dict[str, Any]]:
    """
    For serializing numpy scalars, numpy arrays and tuples-of-arrays to json
    """
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(
        "Object of type {} is not JSON serializable".format(type(obj).__name__)
    )


def format_float(value: float) -> str:
    """
    Shortest decimal string that parses back to the same double
    """
    return repr(float(value))


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """
    Write a CSV file with a header row. Floats are written with format_float so
    re-running an identical computation produces an identical file.
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow(
                [
                    format_float(v) if isinstance(v, (float, np.floating)) else v
                    for v in row
                ]
            )


def read_csv(path: str) -> tuple:
    """
    Read a CSV written by write_csv.
    Returns:
        (header, rows) where rows is a list of lists of strings
    """
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [row for row in reader if row]
    return header, rows


def get_worker_count(default: int = 1) -> int:
    """
    Worker count from the HYPOKERNEL_WORKERS environment variable, else default.
    Invalid values fall back to default.
    """
    raw = os.environ.get("HYPOKERNEL_WORKERS")
    if raw is None:
        return max(1, int(default))
    try:
        return max(1, int(raw))
    except ValueError:
        logging.getLogger().warning(
            "Ignoring invalid HYPOKERNEL_WORKERS value %s", raw
        )
        return max(1, int(default))


# Logging and printing
def print_and_log(
    msg: str,
    log_level: str,
    log: Union[logging.Logger, None] = None,
) -> None:
    """
    Print a message and add it to the log at LOG_LEVEL. Valid log_levels are DEBUG, INFO, WARNING, ERROR
    """
    if log is None:
        log = logging.getLogger()
    print(msg)
    if log_level == "DEBUG":
        log.debug(msg)
    elif log_level == "INFO":
        log.info(msg)
    elif log_level == "WARNING":
        log.warning(msg)
    elif log_level == "ERROR":
        log.error(msg)
    else:
        log.error("Being asked to log at an unknown level: %s", log_level)
        log.info("Unknown message: %s", msg)
