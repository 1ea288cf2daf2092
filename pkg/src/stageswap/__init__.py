"""Stage-swap compression of a toy transformer tracker.

Trains a deep teacher tracker on a synthetic template-matching task, then
compresses it into a shallower student by partitioning both into aligned
stages and stochastically routing each stage through teacher or student
during training, with prediction guidance and stage-wise feature mimicking.
"""

__version__ = "0.1.0"
