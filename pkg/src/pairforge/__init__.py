"""pairforge: geometry-supervised match pair retrieval.

Subpackages by pipeline stage:

* :mod:`pairforge.recon` - reconstruction/match/feature-map/descriptor
  types and their file formats
* :mod:`pairforge.annotate` - covisibility counting and positive lists
* :mod:`pairforge.viewgraph` - weighted view graph and normalized cut
* :mod:`pairforge.mining` - training batch construction
* :mod:`pairforge.losses` - triplet and ranked list losses with gradients
* :mod:`pairforge.aggregate` - feature aggregation heads
* :mod:`pairforge.trainer` - head optimization and checkpoints
* :mod:`pairforge.retrieval` - exact and approximate neighbor search
* :mod:`pairforge.synth` - synthetic scene oracle
* :mod:`pairforge.cli` - command-line pipeline
"""

__version__ = "0.1.0"

__all__ = ["recon", "annotate", "viewgraph", "mining", "losses", "aggregate",
           "trainer", "retrieval", "synth", "cli"]
