"""
Training on synthetic data, in one and two stages
=================================================

Small synthetic videos are enough to see the model learn.  Each video
contains a few event types; the question names one of them.
"""

# %%
from gnnm.hierarchy import HierarchyConfig
from gnnm.synth import SynthSpec, generate
from gnnm.training import TrainConfig, build_model, evaluate, lr_at, run_two_stage, train

spec = SynthSpec(d=32, num_clips=2, frames_per_clip=4, task="open_ended", num_samples=300, seed=0)
data = generate(spec)
train_set, val_set = data[:200], data[200:]

model = build_model(HierarchyConfig(d=32, num_clips=2, frames_per_clip=4), num_answers=4, seed=0)
cfg = TrainConfig(learning_rate=1e-3, batch_size=32, lr_decay="none", epochs=8)
state = train(model, train_set, val_set, cfg)
for h in state.history:
    print(f"epoch {h['epoch']}: validation accuracy {h['accuracy']:.2f}")

# %%
# The default schedule halves the learning rate every five epochs.
print([lr_at(e, TrainConfig()) for e in range(0, 15, 5)])

# %%
# Two stages: a warm-up that ignores the question, then fine-tuning with
# the motion modules slowed to 5% of the base learning rate.
model = build_model(HierarchyConfig(d=32, num_clips=2, frames_per_clip=4), num_answers=4, seed=0)
warm = TrainConfig(stage="warm_up", learning_rate=1e-3, batch_size=32, lr_decay="none", epochs=3)
fine = TrainConfig.fine_tune(learning_rate=1e-3, batch_size=32, epochs=5)
print("fine-tune multipliers:", fine.module_lr_multipliers)
run_two_stage(model, train_set, val_set, warm, fine)
print("after two stages:", evaluate(model, val_set))
