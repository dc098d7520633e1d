"""Schemas module: configuration views, manifest lines, records, evaluation reports"""
from vti.schemas.config import GenerationConfig, NetworkConfig, SynthConfig, TrainConfig
from vti.schemas.evaluation import PRF, ClinicalScores, EvalReport
from vti.schemas.manifest import ManifestEntry
from vti.schemas.records import DatasetRecord, ReportExample

__all__ = [
    "NetworkConfig",
    "TrainConfig",
    "GenerationConfig",
    "SynthConfig",
    "ManifestEntry",
    "DatasetRecord",
    "ReportExample",
    "EvalReport",
    "ClinicalScores",
    "PRF",
]
