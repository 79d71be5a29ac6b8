"""Cross-user activity recognition by temporal-state domain adaptation.

Modules
-------
autodiff
    Reverse-mode automatic differentiation over numpy arrays.
data
    Recording CSVs, sliding windows, normalisation and a synthetic generator.
labeling
    Pseudo temporal-state labelling with a switch-penalised state path.
networks
    Feature extractor, the three heads, composite losses and model files.
training
    The three-phase adversarial training loop.
evaluation
    Metrics, baselines, the cross-user experiment runner and reports.
cli
    The ``dtsda`` command line.
"""

__version__ = "0.1.0"
