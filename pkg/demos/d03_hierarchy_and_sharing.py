"""
The clip/video hierarchy and parameter sharing
==============================================

Each clip runs a chain of modules conditioned on motion, then on the
question, ending in a pooled clip vector.  The video level repeats the
chain over the clip vectors.  Modules either own their weights
(``per_module``) or share one set per level (``per_level``).
"""

# %%
from gnnm.complexity import audit_network
from gnnm.hierarchy import HierarchyConfig, build_network, network_forward, shared_gradient_check
from gnnm.synth import SynthSpec, generate

sample = generate(SynthSpec(d=8, num_clips=2, frames_per_clip=4, num_samples=1))[0]

for sharing in ("per_module", "per_level"):
    net = build_network(HierarchyConfig(d=8, num_clips=2, frames_per_clip=4, sharing=sharing),
                        seed=0, dtype="double")
    report = audit_network(net)
    print(f"{sharing}: {report.num_logical} logical modules, {report.num_physical} weight sets, "
          f"{report.physical_total} parameters")
    print("  output vector:", network_forward(sample, net).shape)

# %%
# A shared weight set receives the sum of the gradients from every place
# it is used.  The check compares against an unshared copy.
net = build_network(HierarchyConfig(d=8, num_clips=2, frames_per_clip=4, sharing="per_level"),
                    seed=0, dtype="double")
report = shared_gradient_check(net, sample, seed=0)
print("call sites per set:", report.call_sites)
print("max |shared grad - sum over call sites|:", report.max_abs_diff)

# %%
# Warm-up mode zeroes the question contexts, so the output no longer
# depends on the question at all.
import numpy as np

a = network_forward(sample, net, warm_up=True).data
sample.question = np.random.default_rng(1).normal(size=8)
b = network_forward(sample, net, warm_up=True).data
print("warm-up output change after swapping the question:", np.abs(a - b).max())
