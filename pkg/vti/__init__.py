"""VTI - variational topic inference for multi-sentence report generation"""

__version__ = "0.1.0"
