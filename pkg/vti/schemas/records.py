"""
In-memory record types
Dataclasses rather than pydantic models because they carry numpy arrays
"""

from dataclasses import dataclass, field

import numpy as np

PAD_ID, BOS_ID, EOS_ID, UNK_ID, SENT_ID = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[BOS]", "[EOS]", "[UNK]", "[SENT]")

CONDITIONS = ("cardiomegaly", "effusion", "opacity", "pneumothorax", "fracture", "device")

SPLITS = ("train", "val", "test")


@dataclass
class DatasetRecord:
    """One image with its report as sentence text"""
    image: np.ndarray            # (S, S) float64 in [0, 1]
    sentences: list[str]
    labels: frozenset[str]
    style: int = 0
    split: str = "train"
    image_path: str = ""         # relative to the dataset directory

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and self.sentences == other.sentences
            and self.labels == other.labels
            and self.style == other.style
            and self.split == other.split
            and self.image_path == other.image_path
        )


@dataclass
class ReportExample:
    """Token-id view of a record, as consumed by the loss"""
    image: np.ndarray
    sentences: list[list[int]]   # no [BOS]/[EOS]
    labels: frozenset[str] = field(default_factory=frozenset)
