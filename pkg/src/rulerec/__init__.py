"""Rule-augmented recommendation over item knowledge graphs."""

__version__ = "0.1.0"

from .kgstore import HeteroGraph, NodeRef, RelationType, AssociationPair, InteractionLog, load_graph
from .rulemine import Rule, MinerConfig, SelfAbsorb, walk_probability, feature_x, feature_F, enumerate_rules
from .ruleselect import SelectionObjective, chi_square_scores, train_selection_weights, select_top_n
from .recmodels import BPRMF, NCF, TrainConfig, train_base
from .combine import Variant, Combiner, RuleRecModel, recommend_topk, explain
from .evaluation import leave_one_out_split, evaluate, paired_t
from .synthgen import SynthConfig, generate

__all__ = [
    "HeteroGraph", "NodeRef", "RelationType", "AssociationPair", "InteractionLog", "load_graph",
    "Rule", "MinerConfig", "SelfAbsorb", "walk_probability", "feature_x", "feature_F", "enumerate_rules",
    "SelectionObjective", "chi_square_scores", "train_selection_weights", "select_top_n",
    "BPRMF", "NCF", "TrainConfig", "train_base",
    "Variant", "Combiner", "RuleRecModel", "recommend_topk", "explain",
    "leave_one_out_split", "evaluate", "paired_t",
    "SynthConfig", "generate",
]
