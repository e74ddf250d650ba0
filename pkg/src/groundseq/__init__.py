"""Visual grounding as sequence generation: tiny encoder-decoder, coordinate-bin
tokens, synthetic desk scenes, and a training/eval harness around them."""

__version__ = "0.1.0"
