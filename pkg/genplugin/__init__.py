"""GenPlugin - dual-encoder, shared-decoder plugin for generative recommendation."""
