"""Graph self-supervised learning (InfoGraph, JOAO, GraphMAE) for rumor propagation trees."""

__version__ = "0.1.0"
