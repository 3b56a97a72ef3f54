"""File storage helpers: atomic replacement, key=value sidecars and result CSVs."""

import contextlib
import csv
import logging
import os
import shutil
from typing import Any, Dict, Iterator, List, Mapping, Sequence

logger = logging.getLogger(__name__)


@contextlib.contextmanager
def atomic_writer(path: str, binary: bool = False) -> Iterator[Any]:
    """Write to ``path.tmp`` and replace ``path`` only once the write completed."""
    temp_file = path + ".tmp"
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    mode = "wb" if binary else "w"
    kwargs = {} if binary else {"encoding": "utf-8", "newline": ""}
    try:
        with open(temp_file, mode, **kwargs) as f:
            yield f
            f.flush()
            os.fsync(f.fileno())
        os.replace(temp_file, path)
    except BaseException:
        try:
            if os.path.exists(temp_file):
                os.remove(temp_file)
        except OSError:
            pass
        raise


def write_kv_file(path: str, values: Mapping[str, Any]) -> None:
    """Write a flat ``key=value`` text file."""
    with atomic_writer(path) as f:
        for key, value in values.items():
            f.write(f"{key}={value}\n")


def read_kv_file(path: str) -> Dict[str, str]:
    """Parse a flat ``key=value`` text file; ``#`` starts a comment."""
    values: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}: malformed line {line!r}")
            values[key.strip()] = value.strip()
    return values


class ResultTable:
    """CSV file of experiment rows with a fixed column order and a backup copy."""

    def __init__(self, csv_file: str, columns: Sequence[str]):
        self.csv_file = csv_file
        self.backup_file = csv_file + ".backup"
        self.columns = list(columns)

    def _create_backup(self) -> None:
        try:
            if os.path.exists(self.csv_file):
                shutil.copy2(self.csv_file, self.backup_file)
        except OSError as e:
            logger.warning("backup of %s failed: %s", self.csv_file, e)

    def save(self, rows: Sequence[Mapping[str, Any]]) -> str:
        """Replace the file with ``rows``; returns the path written."""
        self._create_backup()
        with atomic_writer(self.csv_file) as f:
            writer = csv.DictWriter(f, fieldnames=self.columns, extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow({column: row.get(column, "") for column in self.columns})
        return self.csv_file

    def load(self) -> List[Dict[str, str]]:
        """Read rows back, falling back to the backup if the file is unreadable."""
        for candidate in (self.csv_file, self.backup_file):
            try:
                with open(candidate, "r", encoding="utf-8", newline="") as f:
                    return list(csv.DictReader(f))
            except FileNotFoundError:
                continue
            except (OSError, csv.Error) as e:
                logger.warning("reading %s failed: %s", candidate, e)
        raise FileNotFoundError(self.csv_file)
