"""Instruction-guided navigation in synthetic graph worlds.

Agents are trained with imitation, reinforcement, and momentum-contrast
consistency objectives, then adapted per episode at test time by minimizing
prediction entropy over augmented views while the supervised parameters stay
frozen.
"""

__version__ = "0.1.0"
