"""Services package - signal processing, data, model, training and evaluation logic."""
