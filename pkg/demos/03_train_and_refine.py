"""
Training the two-stage model
============================

A short run on a small synthetic set.  The encoder is first pre-trained to
predict per-joint heatmaps, which speeds up the main run a lot.  The
proposal network then predicts every
joint from globally pooled features; each refinement layer then samples
features around the proposal's projection in both views and adds a
correction.  The printed per-stage errors show how much the refinement
buys.  Pass a larger sample count and epoch budget on the command line for
a more converged model, e.g. ``python3 03_train_and_refine.py 2000 12``.
"""
import sys

import numpy as np

from egopose import TrainConfig, default_rig, default_tree, evaluate, generate_dataset, train
from egopose.model import export_self_attention
from egopose.trainer import ablate_proposal_noise, configure_threads, model_config_for, pretrain_heatmaps

n_train = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 6
configure_threads()

rig, tree = default_rig(), default_tree()
train_set = generate_dataset(n_train, tree, rig, seed=0)
test_set = generate_dataset(100, tree, rig, seed=1, prefix="test")

cfg = TrainConfig(epochs=epochs, decay_epochs=(max(1, epochs - 1),), precision="32-bit")
encoder = pretrain_heatmaps(train_set, cfg, model_config_for(train_set),
                            progress=lambda e: print(f"pretrain epoch {e['epoch']}: "
                                                     f"heatmap loss {e['loss']:.4f}"))
ck = train(train_set, cfg, model_config_for(train_set), init=encoder.stripped(), val_dataset=test_set,
           progress=lambda e: print(f"epoch {e['epoch']}: loss {e['loss']:.0f}, "
                                    f"val MPJPE {e['val_mpjpe']:.1f} mm"))

###############################################################################
# Stage-wise error on held-out data; stage 0 is the proposal.

report = evaluate(ck, test_set)
for s, err in enumerate(report.stage_mpjpe):
    print(f"stage {s}: {err:.1f} mm")
print(f"PA-MPJPE {report.pa_mpjpe:.1f} mm")
for part, err in sorted(report.per_joint.items(), key=lambda kv: kv[1])[:4]:
    print(f"  best joint {part}: {err:.1f} mm")

###############################################################################
# Replace the proposal by noisy ground truth and refine it.

for row in ablate_proposal_noise(ck.model, test_set, [10.0, 30.0, 50.0]):
    print(f"sigma {row['sigma']:>4.0f} mm: proposal {row['proposal_mpjpe']:6.1f}, "
          f"refined {row['refined_mpjpe']:6.1f}")

###############################################################################
# Joint-to-joint self-attention of the last layer, averaged over samples.

att = export_self_attention(ck.model, test_set.samples[:32])
names = tree.names
others = att - np.diag(np.full(len(att), np.inf))
top = others.argmax(axis=1)
for j in (0, 8, 14):
    print(f"{names[j]} attends most (besides itself) to {names[top[j]]} ({att[j, top[j]]:.2f})")
