"""Online point tracking on streaming video, at desk scale.

Frame-by-frame correspondence via patch classification, re-ranking and offset
refinement, with per-query spatial and context FIFO memories. Built on a small
float64 autodiff engine so the whole stack is trainable and gradient-checkable
on a laptop CPU.
"""

__version__ = "0.1.0"
