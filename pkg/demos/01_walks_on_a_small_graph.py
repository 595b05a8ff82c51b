# %% [markdown]
# # Rule walks on a five-node graph
#
# A rule is a sequence of relation types. Its feature for an item pair
# (a, b) is the probability that a uniform random walk from a, following the
# relations in order, ends at b.

# %%
from rulerec.kgstore import NodeKind, NodeRef, build_graph
from rulerec.rulemine import MinerConfig, Rule, feature_F, feature_x, walk_probability

nodes = [
    NodeRef(0, NodeKind.ITEM, "phone"),
    NodeRef(1, NodeKind.ITEM, "case"),
    NodeRef(2, NodeKind.ENTITY, "acme", "brand"),
    NodeRef(3, NodeKind.ENTITY, "zeta", "brand"),
    NodeRef(4, NodeKind.ENTITY, "droid", "os"),
]
edges = [(0, "r1", 2), (0, "r1", 3), (2, "r2", 1), (3, "r2", 1), (3, "r2", 4)]
g = build_graph(nodes, edges)
print(g)
print([r.name for r in g.relations])

# %% [markdown]
# From `phone`, `r1` splits the walk over two brands. `acme` always continues
# to `case`; `zeta` does so half the time.

# %%
rule = Rule.from_names(g, ["r1", "r2"])
print("P(case | phone, r1 r2) =", walk_probability(g, 0, 1, rule))

# %% [markdown]
# ## Self-absorption
#
# A walk that has already reached its target may stay there. Under
# `final_only` this is allowed on the last step only, so `r1 r2 r2⁻¹` from
# `phone` keeps the 0.75 that `r1 r2` delivers to `case`. With `off` the last
# step must leave `case` and the probability drops to zero.

# %%
longer = Rule.from_names(g, ["r1", "r2", "r2⁻¹"])
for mode in ("off", "final_only", "always"):
    cfg = MinerConfig(self_absorb=mode)
    print(f"{mode:>10}: P(case | phone, r1 r2 r2⁻¹) = {walk_probability(g, 0, 1, longer, cfg):.3f}")

# %% [markdown]
# ## Two feature kinds
#
# `x` is the walk probability used for rule selection. `F` replaces the last
# step's transition probability by an indicator, so long rules are not
# penalised when they contribute to recommendation scores.

# %%
rules = [rule, longer]
print("x:", feature_x(g, 0, 1, rules))
print("F:", feature_F(g, 0, 1, rules))
