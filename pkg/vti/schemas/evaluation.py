"""
Evaluation report schemas
"""

from pydantic import BaseModel, Field, field_validator


class PRF(BaseModel):
    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)


class ClinicalScores(BaseModel):
    """Label-level agreement between generated and reference reports"""
    micro: PRF
    macro: PRF
    per_label: dict[str, PRF] = {}


class EvalReport(BaseModel):
    """Corpus metrics for one generated manifest against its references"""
    bleu: list[float]
    rouge_l: float = Field(ge=0.0, le=1.0)
    meteor_lite: float = Field(ge=0.0, le=1.0)
    clinical: ClinicalScores
    length_hist_generated: dict[int, int] = {}
    length_hist_reference: dict[int, int] = {}
    per_report_bleu: list[float] = []
    variant_micro_f1: dict[int, float] = {}
    variant_diversity: float = Field(0.0, ge=0.0, le=1.0)
    n_reports: int = 0

    @field_validator("bleu")
    @classmethod
    def _unit_interval(cls, values: list[float]) -> list[float]:
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("BLEU scores must lie in [0, 1]")
        return values

    @property
    def variant_f1_spread(self) -> float:
        if not self.variant_micro_f1:
            return 0.0
        scores = list(self.variant_micro_f1.values())
        return max(scores) - min(scores)

    def metric_rows(self) -> list[tuple[str, float]]:
        """Flat (metric, value) pairs for CSV output"""
        rows = [(f"bleu_{i + 1}", v) for i, v in enumerate(self.bleu)]
        rows += [("rouge_l", self.rouge_l), ("meteor_lite", self.meteor_lite)]
        for scope in ("micro", "macro"):
            prf = getattr(self.clinical, scope)
            rows += [
                (f"clinical_{scope}_precision", prf.precision),
                (f"clinical_{scope}_recall", prf.recall),
                (f"clinical_{scope}_f1", prf.f1),
            ]
        for variant, f1 in sorted(self.variant_micro_f1.items()):
            rows.append((f"variant_{variant}_micro_f1", f1))
        if self.variant_micro_f1:
            rows.append(("variant_micro_f1_spread", self.variant_f1_spread))
            rows.append(("variant_diversity", self.variant_diversity))
        rows.append(("n_reports", float(self.n_reports)))
        return rows
