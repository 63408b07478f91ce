"""Training regimes, evaluation, file formats and the command-line interface."""
