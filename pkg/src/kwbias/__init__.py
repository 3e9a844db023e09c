"""Keyword-guided contextual biasing for a compact encoder-decoder ASR.

A keyword spotter reading the shared encoder representation picks out
which of a candidate keyword list was actually spoken; the hits are
packed into a decoder prompt between start-of-previous-text and
start-of-transcript markers.  Two adaptation regimes teach the decoder
to exploit that prompt: full decoder fine-tuning, and prompt tuning of a
small learned soft-token prefix with every model weight frozen.
"""

__version__ = "0.1.0"
