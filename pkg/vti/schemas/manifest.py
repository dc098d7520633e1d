"""
Manifest line schema
One JSON object per line in manifest.jsonl (datasets and generated reports alike)
"""

from typing import Literal

from pydantic import BaseModel, ConfigDict, field_validator

from vti.schemas.records import CONDITIONS


class ManifestEntry(BaseModel):
    """A record as stored on disk; image is relative to the manifest's directory"""
    model_config = ConfigDict(extra="forbid")

    image: str
    sentences: list[str]
    labels: list[str] = []
    style: int = 0
    split: Literal["train", "val", "test"] = "train"
    variant: int | None = None  # generated manifests only

    @field_validator("labels")
    @classmethod
    def _known_labels(cls, labels: list[str]) -> list[str]:
        unknown = [label for label in labels if label not in CONDITIONS]
        if unknown:
            raise ValueError(f"unknown condition label(s): {', '.join(unknown)}")
        return labels
