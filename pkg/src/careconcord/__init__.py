"""Concordance measurement for patient pathways on hierarchical care networks.

The package learns arc costs on a multilevel care network from recommended
("reference") pathway fragments via inverse shortest-path optimization, then
scores how closely observed patient pathways follow the recommendations and
decomposes population-level discordance by care section.
"""

__version__ = "0.1.0"

from .errors import InputError, SolverError, SpecError

__all__ = ["InputError", "SolverError", "SpecError", "__version__"]
