"""Synthetic data, shards, views and batching."""
