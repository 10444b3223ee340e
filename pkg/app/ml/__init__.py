"""Function approximators, optimizers, return estimators and trust-region updates."""
