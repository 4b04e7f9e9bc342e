"""Sequential resale auction over social networks, its centralized reduction and baselines."""
from .network import (BuyerProfile, Network, ReportedProfile, SpanningTree, ValidSubgraph,
                      build_valid_subgraph, load_graph, load_named)
from .engine import INTENDED, Strategy, run_sra
from .crm import OutcomeSummary, closed_form_tree_outcome, crm_run
from .baselines import idm_run, vcg_neighbors

__all__ = [
    "BuyerProfile", "Network", "ReportedProfile", "SpanningTree", "ValidSubgraph",
    "build_valid_subgraph", "load_graph", "load_named",
    "INTENDED", "Strategy", "run_sra",
    "OutcomeSummary", "closed_form_tree_outcome", "crm_run",
    "idm_run", "vcg_neighbors",
]
