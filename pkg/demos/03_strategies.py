# The four fine-tuning strategies side by side, plus the weighted loss.
#
# Run 02_pretrain_and_finetune.py first; it writes pretrained.ftlb.

import numpy as np

from ftlab import data as D
from ftlab import strategies as S
from ftlab import trainer as TR
from ftlab.checkpoint import load_checkpoint
from ftlab.cli import format_metric, render_table

pretrained = load_checkpoint("pretrained.ftlb")

# Learning-rate groups. At 12 layers the four groups are exactly layers
# 0-3 (+ embeddings), 4-7, 8-11 (+ pooler) and the head.

names = [f"layer.{i}.ff.in.weight" for i in range(12)] + ["embed.tok", "pooler.dense.weight", "head.out.weight"]
for g in S.build_param_groups(names, 12, "4group", 3e-5):
    print("%-7s x%-8.4g lr %.4g  %s" % (g.name, g.lr_multiplier, g.lr, sorted(g.param_names)[:3]))

# Mixout keeps the expectation at the current weights while pulling
# individual entries back to their pretrained values.

rng = np.random.default_rng(0)
w, w_pre = np.ones(6), np.zeros(6)
print("one mixout draw (p=0.5):", S.mixout_transform(w, w_pre, 0.5, rng).data)

# Inverse-frequency class weights for a 73/27 split.

print("class weights:", S.class_weights_from_counts([13291, 4909]))

# Now train each configuration on a skewed task with the same seed, so the
# split, head init and batch order are shared.

task = D.SynthTaskSpec(size=500, priors=(0.73, 0.27), marker_prob=0.5, noise_rate=0.2, seed=3)
examples = D.generate_synth(task)

configs = [
    S.StrategyConfig(),
    S.StrategyConfig(llrd="2group"),
    S.StrategyConfig(llrd="4group"),
    S.StrategyConfig(mixout_p=0.7),
    S.StrategyConfig(reinit_n=2),
    S.StrategyConfig(pooling="avg4"),
    S.StrategyConfig(pooling="concat4"),
    S.StrategyConfig(class_weights="auto"),
    S.StrategyConfig(llrd="4group", mixout_p=0.7, reinit_n=2),
]
rows = []
for strat in configs:
    test = TR.finetune(pretrained, examples, TR.TrainConfig(seed=0, strategy=strat)).test
    rows.append((strat.label(), *(format_metric(test[k]) for k in ("precision", "recall", "accuracy", "f_score"))))
print(render_table(rows))

# Intermediate-layer pooling and re-initialisation are never combined.

try:
    S.StrategyConfig(pooling="avg4", reinit_n=2).validate()
except Exception as exc:
    print(type(exc).__name__, exc)
