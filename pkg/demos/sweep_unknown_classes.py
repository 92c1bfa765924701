"""
Sweeping the number of unknown classes
======================================

Open-set behavior should not be a special case: whether the target
contains zero, a few, or many classes nobody annotated, adapting must not
do worse than training on the sources alone. This script sweeps the count
of target-only classes at reduced sizes and reports the transfer gain at
each point. The CLI runs the same experiment from a config file:

    python3 -m uman sweep demos/configs/standard.json --axis target_private_size --values 0,3,6
"""

from uman import SyntheticSpec, UmdaMatrix, generate, partition_from_matrix
from uman.core import Hyperparams
from uman.evaluate import run_method, transfer_gain

spec = SyntheticSpec(feature_dim=12, samples_per_class=100, class_center_scale=0.8,
                     noise_sigma=0.35, seed=0)
hp = Hyperparams(max_steps=1500, batch_size=32, feature_hidden=(48,), feature_dim=12,
                 disc_hidden=(48,), grl_max_lambda=0.15, lr_classifier=0.15,
                 lr_discriminator=0.7, weight_decay=0.003, seed=0)

print("target-only classes | source-only | uman  | transfer gain")
for k in (0, 3, 6):
    partition = partition_from_matrix(UmdaMatrix((5, 5), (3, 3), 6, k))
    data = generate(spec, partition)
    test = generate(spec, partition, draw=1)[-1]
    _, base = run_method("source_only", data, test, partition, hp)
    _, full = run_method("uman", data, test, partition, hp)
    print(
        f"{k:>19} | {base.mean_per_class_accuracy:>11.3f} "
        f"| {full.mean_per_class_accuracy:.3f} | {transfer_gain(full, base):+.3f}"
    )

# With no unknown classes the rejection threshold can only cost accuracy,
# so the gain there is the acid test: the weighting has to earn back what
# rejection gives up. More unknowns make rejection itself valuable and
# the gap widens. Single-seed numbers at these reduced sizes move around
# a few points between seeds; the committed configuration averages three.
