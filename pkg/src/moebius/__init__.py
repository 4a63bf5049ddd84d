"""Coach/Player co-evolution training framework.

A coach policy proposes difficulty-filtered tasks, a player policy learns
from majority-vote pseudo-labels via group-normalized policy optimization,
and the coach is reinforced on the player's measured validation progress.
Ships a deterministic modular-arithmetic task domain so the whole loop is
exactly evaluable and replayable at desk scale, plus an HTTP wire protocol
for remote policy backends.
"""

__version__ = "0.1.0"
