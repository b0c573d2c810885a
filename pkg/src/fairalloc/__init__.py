"""fairalloc: proportional-fairness allocation for strategic agents.

Submodules
----------
core        domain types, welfare metrics, serialization
pfsolve     interior-point PF solver with KKT certificates + reference oracle
diffpf      implicit differentiation through the PF optimality system
mlp         minimal dense network with manual gradients
mechanisms  PF / partial-allocation / mixture / learned mechanisms
exploit     misreport search and exploitability estimates
datagen     synthetic instance sampling
train       primal-dual training of learned mechanisms
experiments batch experiment drivers behind the CLI
"""

__version__ = "0.1.0"
