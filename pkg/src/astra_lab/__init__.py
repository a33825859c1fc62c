"""astra_lab: a desk-scale laboratory for grounding abstract simulators
with history-conditioned corrections and transferring policies trained in
them to richer target environments."""

__version__ = "0.1.0"
