"""
furnistyle: style-compatibility metric learning for furniture items.

Siamese embeddings (contrastive / categorical / short / classification baseline),
strategic pair sampling, dataset curation, AUC / recall / KDE evaluation,
joint image-text embedding and nearest-neighbour retrieval, all on a small
numpy reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
