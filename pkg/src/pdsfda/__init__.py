"""Source-free domain adaptation with diverse ensembles, penalized by hypothesis disparity.

Modules: ``diffcore`` (MLP forward/backward and losses), ``datagen`` (synthetic
shifted pairs, label shift, CSV), ``ensemble`` (topologies, source training,
snapshots), ``adapt`` (target objective and anchors), ``metrics`` and
``harness`` (seeded experiment pipelines, CLI in ``cli``).
"""

__version__ = "0.1.0"
