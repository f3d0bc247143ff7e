"""
Result files of one CLI run.

Every file goes under the configured output directory and carries the same
header (command, config hash, seed, package version), never a timestamp.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Sequence

from src import __version__
from src.core.export import write_csv, write_json
from src.data.exceptions import ConfigError

logger = logging.getLogger("pomp.artifacts")


@dataclass
class ArtifactWriter:
    directory: Path
    command: str
    config_hash: str
    seed: int
    formats: Sequence[str] = ("csv", "json")
    written: List[Path] = field(default_factory=list)

    def __post_init__(self):
        self.directory = Path(self.directory)
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"cannot create output directory: {e}",
                              location="outputs.directory") from e

    @property
    def header(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "version": __version__,
        }

    def path(self, name: str) -> Path:
        return self.directory / name

    def _record(self, path: Path) -> Path:
        self.written.append(path)
        logger.debug("Artifact written", extra={"event_type": "artifact", "path": str(path)})
        return path

    def csv(self, name: str, columns: Sequence[str], rows: Iterable[Sequence[Any]],
            force: bool = False) -> None:
        if force or "csv" in self.formats:
            self._record(write_csv(self.path(f"{name}.csv"), columns, rows, self.header))

    def json(self, name: str, record: Mapping[str, Any], force: bool = False) -> None:
        if force or "json" in self.formats:
            self._record(write_json(self.path(f"{name}.json"), record, self.header))

    def export(self, filename: str, exporter: Callable[[Path, Dict[str, Any]], Path]) -> None:
        """Run a module-level CSV exporter (destination, header) into the output directory."""
        if "csv" in self.formats:
            self._record(exporter(self.path(filename), self.header))

    def table(self, name: str, rows: Sequence[Mapping[str, Any]]) -> None:
        """Flat records as CSV (union of keys, first-seen order) and as a JSON list."""
        columns: List[str] = []
        for row in rows:
            columns.extend(key for key in row if key not in columns)
        self.csv(name, columns, ([row.get(c) for c in columns] for row in rows))
        self.json(name, {"rows": list(rows)})
