"""Feature quantization for small graph neural networks.

Trains GCN / GAT-lite / AGNN-lite node classifiers, applies uniform,
layer-wise, component-wise, and degree-bucketed bit assignments with
straight-through-estimator finetuning, accounts the resulting feature
memory exactly, and searches the bit space with a regression-tree
accuracy surrogate.
"""

__version__ = "0.1.0"
