"""Multi-scale receptive-field graph attention for point-cloud classification."""
