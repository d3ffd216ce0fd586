"""Label schemas: ordered label names, palette, task kind."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

from .errors import DataError

Task = Literal["segmentation", "keypoints"]


@dataclass(frozen=True)
class LabelSchema:
    """Ordered label set. Index 0 is reserved for unlabeled/background.

    For keypoint tasks the names double as keypoint names (index 0 unused).
    """

    names: tuple[str, ...]
    palette: tuple[tuple[int, int, int], ...]
    task: Task = "segmentation"

    def __post_init__(self) -> None:
        names = tuple(self.names)
        palette = tuple(tuple(int(v) for v in rgb) for rgb in self.palette)
        if len(set(names)) != len(names):
            raise DataError("label names must be unique")
        if len(palette) != len(names):
            raise DataError(
                f"palette length {len(palette)} != label count {len(names)}"
            )
        if self.task not in ("segmentation", "keypoints"):
            raise DataError(f"unknown task {self.task!r}")
        for rgb in palette:
            if len(rgb) != 3 or any(not (0 <= v <= 255) for v in rgb):
                raise DataError(f"bad palette entry {rgb!r}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "palette", palette)

    def __len__(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"label {name!r} not in schema") from None

    def to_dict(self) -> dict:
        return {"names": list(self.names), "palette": [list(p) for p in self.palette], "task": self.task}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSchema":
        return cls(
            names=tuple(d["names"]),
            palette=tuple(tuple(p) for p in d["palette"]),
            task=d.get("task", "segmentation"),
        )
