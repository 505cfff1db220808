# utils.py

import os
import sys
import tempfile
from contextlib import contextmanager
from typing import Callable, Iterator, List, TypeVar

import orjson
import pandas as pd

from crforest.config import RunConfig
from crforest.errors import ParameterError

FLOAT_FORMAT = "%.17g"

T = TypeVar("T")


def _current_umask() -> int:
    # os.umask can only be read by setting it
    mask = os.umask(0o022)
    os.umask(mask)
    return mask


@contextmanager
def atomic_path(path: str) -> Iterator[str]:
    """Yields a temporary path next to `path`; moved into place only on success."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    os.close(fd)
    try:
        yield tmp_path
        os.chmod(tmp_path, 0o666 & ~_current_umask())
        os.replace(tmp_path, path)
    finally:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)


def write_bytes(path: str, payload: bytes) -> None:
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as f:
            f.write(payload)


def write_table(df: pd.DataFrame, path: str, json_mirror: bool = False) -> None:
    """Writes a CSV table (17 significant digits), optionally mirrored as <path>.json."""
    with atomic_path(path) as tmp:
        df.to_csv(tmp, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    if json_mirror:
        records = df.to_dict(orient="records")
        write_bytes(path + ".json", orjson.dumps(records, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY))


def read_table(path: str) -> pd.DataFrame:
    """Reads a CSV written by `write_table`, recovering every float bit for bit."""
    return pd.read_csv(path, float_precision="round_trip")


def write_run_metadata(output_path: str, run: RunConfig) -> str:
    """Stores the resolved run configuration beside an output artifact."""
    meta_path = output_path + ".meta.json"
    write_bytes(meta_path, run.to_json().encode("utf-8"))
    return meta_path


def parse_number_list(text: str, cast: Callable[[str], T]) -> List[T]:
    """Parses '10,20,40' style flag values."""
    try:
        values = [cast(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ParameterError(f"cannot parse list '{text}': {e}") from e
    if not values:
        raise ParameterError(f"empty list '{text}'")
    return values


def stderr_is_tty() -> bool:
    try:
        return sys.stderr.isatty()
    except (AttributeError, ValueError):
        return False
