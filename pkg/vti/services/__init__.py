"""
Services module - VTI pipeline stages

Structure:
- latent_service: diagonal Gaussians, KL, cyclical annealing
- model_service: the network and its ELBO
- dataset_service: synthetic corpus, tokenizer, vocabulary, dataset files
- training_service: Adam, fit, training history
- checkpoint_service: binary checkpoints
- generation_service: sampling, variant selection, attention export
- metrics_service: BLEU, ROUGE-L, METEOR-lite, clinical efficacy
"""
from vti.services.model_service import VtiModel, elbo_loss

__all__ = [
    "VtiModel",
    "elbo_loss",
]
