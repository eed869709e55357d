"""Rare-event estimation with cross-entropy importance sampling."""
