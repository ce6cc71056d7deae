"""JSON-Lines dataset manifest tying images to descriptors and labels."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path


class ManifestError(RuntimeError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    n_particles: int
    aspect_ratio: float
    volume_fraction: float
    c1111_gpa: float | None = None
    c2222_gpa: float | None = None
    c1212_gpa: float | None = None
    split: str | None = None

    @property
    def labeled(self) -> bool:
        return None not in (self.c1111_gpa, self.c2222_gpa, self.c1212_gpa)

    @property
    def labels(self) -> tuple[float, float, float]:
        if not self.labeled:
            raise ManifestError(f"record {self.id} is unlabeled")
        return (self.c1111_gpa, self.c2222_gpa, self.c1212_gpa)


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate record ids in manifest")

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def labeled_records(self) -> list[ManifestRecord]:
        return [r for r in self.records if r.labeled]

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for r in self.records:
                f.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        records = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    records.append(ManifestRecord(**json.loads(line)))
        return cls(records=records, root=path.parent)


def with_labels(record: ManifestRecord, c1111: float, c2222: float, c1212: float) -> ManifestRecord:
    return replace(record, c1111_gpa=c1111, c2222_gpa=c2222, c1212_gpa=c1212)
