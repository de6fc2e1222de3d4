"""Data, metrics, training, gradient checking and cost accounting."""
