"""Autoencoders within flows."""
