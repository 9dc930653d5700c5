"""High-order moment regularization toolkit."""
