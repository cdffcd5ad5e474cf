"""Synthetic oracle world: scene graphs and ground-truth backends."""
