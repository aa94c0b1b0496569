"""
Parameter counts and the space bound
====================================

Closed-form counts are checked against the scalars actually allocated.
"""

# %%
from gnnm.complexity import component_formula, count_gnnm_params, count_parts, space_lower_bound, \
    temporal_formula
from gnnm.module import GnnmConfig

cfg = GnnmConfig(d=512, n=16, attention_variant="temporal")
print("per-part counts:", count_parts(cfg))
print("total:", count_gnnm_params(cfg), "closed form 7d^2+6d+3:", temporal_formula(512))

# %%
# The component variant adds an n-dependent term.
for n in (4, 8, 16):
    print(f"component d=64 n={n}:", component_formula(64, n))

# %%
# Memory needed for the parameters and their gradients, in float32 slots and bytes.
slots, nbytes = space_lower_bound(temporal_formula(512))
print(f"space bound: {slots:,} slots = {nbytes / 2**20:.1f} MiB")

# %%
# Whole-network audit, as printed by ``gnnm params``.
from gnnm.complexity import audit_network
from gnnm.hierarchy import HierarchyConfig, build_network

net = build_network(HierarchyConfig(d=64, num_clips=8, frames_per_clip=16, sharing="per_level"), seed=0)
print(audit_network(net).render_table())
