"""ViT-5 components, a small autodiff engine and desk-scale ablation tooling."""

__version__ = "0.1.0"
