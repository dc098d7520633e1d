"""
Typed configuration views
Each service receives one of these instead of reading flat settings keys
"""

from pydantic import BaseModel, ConfigDict, Field, model_validator


class NetworkConfig(BaseModel):
    """Model dimensions and architecture switches"""
    model_config = ConfigDict(frozen=True)

    image_size: int = Field(32, ge=8)
    d_v: int = Field(64, ge=1)
    d_h: int = Field(64, ge=1)
    d_z: int = Field(64, ge=1)
    d_e: int = Field(64, ge=1)
    d_hidden: int = Field(64, ge=1)
    n_max: int = Field(7, ge=1)
    visual_head_dim: int = Field(8, ge=1)
    language_heads: int = Field(4, ge=1)
    transformer_layers: int = Field(2, ge=0)
    max_positions: int = Field(32, ge=1)
    visual_positional: bool = False
    inject_topic_each_step: bool = False
    shared_prior_mlp: bool = False
    deterministic_topics: bool = False  # non-latent baseline: z = prior mean, no KL
    vocab_size: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_heads(self):
        if self.d_e % self.language_heads != 0:
            raise ValueError(f"d_e={self.d_e} not divisible by language_heads={self.language_heads}")
        if self.image_size % 8 != 0:
            raise ValueError(f"image_size={self.image_size} must be a multiple of 8 (three stride-2 stages)")
        return self

    @property
    def visual_model_dim(self) -> int:
        """Width of the visual transformer: one head per topic slot"""
        return self.n_max * self.visual_head_dim


class TrainConfig(BaseModel):
    """Optimizer, annealing and early-stopping settings"""
    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(3e-4, ge=0.0)
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_epsilon: float = Field(1e-8, gt=0.0)
    batch_size: int = Field(32, ge=1)
    max_epochs: int = Field(30, ge=1)
    max_steps: int = Field(0, ge=0)  # 0 = unlimited
    patience: int = Field(5, ge=1)
    mc_samples: int = Field(1, ge=1)
    beta_max: float = Field(1.0, ge=0.0)
    anneal_cycles: int = Field(4, ge=1)
    anneal_ramp_ratio: float = Field(0.5, gt=0.0, le=1.0)
    dropout_rate: float = Field(0.5, ge=0.0, lt=1.0)
    grad_clip: float = Field(5.0, ge=0.0)  # 0 disables clipping
    supervise_empty_slots: bool = True
    seed: int = 7


class GenerationConfig(BaseModel):
    """Sampling settings for report generation"""
    model_config = ConfigDict(frozen=True)

    temperature: float = Field(0.7, gt=0.0)
    top_k: int = Field(5, ge=1)
    variants: int = Field(3, ge=1)
    rescoring_samples: int = Field(10, ge=1)
    max_sentence_len: int = Field(20, ge=1)
    seed: int = 7


class SynthConfig(BaseModel):
    """Synthetic corpus settings"""
    model_config = ConfigDict(frozen=True)

    n: int = Field(2000, ge=1)
    seed: int = 7
    style_count: int = Field(3, ge=1)
    min_freq: int = Field(2, ge=1)
    image_size: int = Field(32, ge=8)
